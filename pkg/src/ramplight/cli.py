"""ramplight command line: gen-data, optimal, train, eval, preprocess.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("ramplight")


def _limit_threads():
    # only effective before numpy is first imported
    n = os.environ.get("RAMPLIGHT_THREADS")
    if n:
        for var in THREAD_VARS:
            os.environ.setdefault(var, n)


# --- dataset directory ------------------------------------------------------------
#
# <data_dir>/day_<id>.csv            time,irradiance rows
# <data_dir>/day_<id>.features.csv   feature sidecar
# <data_dir>/manifest.json           day files and the train/validation/test split

MANIFEST = "manifest.json"


def _day_file(day_id: int) -> str:
    return f"day_{day_id:04d}.csv"


def cmd_gen_data(cfg, out_dir):
    from .timeseries import generate_days, features_path, save_csv, save_features, split_days

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    days = generate_days(cfg.data.synthetic, cfg.data.n_days, cfg.data.first_start)
    for series, feats in days:
        path = out / _day_file(series.day_id)
        save_csv(series, path)
        save_features(feats, series, features_path(path))
    split = split_days([s.day_id for s, _ in days], cfg.data.split_ratios, cfg.data.split_seed)
    manifest = {
        "dt": cfg.data.synthetic.dt,
        "days": {str(s.day_id): _day_file(s.day_id) for s, _ in days},
        "train": [int(d) for d in split.train],
        "validation": [int(d) for d in split.validation],
        "test": [int(d) for d in split.test],
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    log.info("wrote %d days to %s", len(days), out)


def load_dataset(data_dir):
    """Returns ({day_id: Episode}, manifest)."""
    from .episodes import Episode
    from .timeseries import features_path, load_csv, load_features

    root = Path(data_dir)
    with open(root / MANIFEST) as fh:
        manifest = json.load(fh)
    episodes = {}
    for key, name in manifest["days"].items():
        series = load_csv(root / name, day_id=int(key))
        fp = features_path(root / name)
        feats = load_features(fp, series) if fp.exists() else None
        episodes[int(key)] = Episode(series, feats)
    return episodes, manifest


def _split(episodes, manifest, name):
    return [episodes[d] for d in manifest[name]]


def cmd_optimal(cfg, data_dir, out_dir):
    from .control import Action, baseline_rollout, hindsight_optimal, optimal_label, save_trajectory_csv, throughput

    episodes, _ = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ramp = cfg.ramp
    rows = []
    for day_id in sorted(episodes):
        ep = episodes[day_id]
        base = baseline_rollout(ep.series, ep.u0, ramp)
        base.actions = [Action.TRACK] * len(base)
        table = ep.table(ramp)
        opt = hindsight_optimal(ep.series, ep.u0, ramp, table=table)
        prev = [ep.u0] + list(opt.u[:-1])
        opt.actions = [optimal_label(table, t, float(p))[0] for t, p in enumerate(prev)]
        save_trajectory_csv(base, ep.s, out / f"baseline_{day_id:04d}.csv")
        save_trajectory_csv(opt, ep.s, out / f"optimal_{day_id:04d}.csv")
        j_base = throughput(ep.s, base.u, ramp.dt)
        j_opt = throughput(ep.s, opt.u, ramp.dt)
        rows.append((day_id, j_base, j_opt, int(not j_base > j_opt)))
    with open(out / "throughput.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day_id", "j_base", "j_opt", "degenerate"])
        for day_id, jb, jo, deg in rows:
            w.writerow([day_id, repr(jb), repr(jo), deg])


def cmd_train(cfg, data_dir, model_path, out_dir):
    from . import approximator
    from .evaluation import build_policy
    from .imitation import save_history_csv

    episodes, manifest = load_dataset(data_dir)
    train = _split(episodes, manifest, "train")
    if not train:
        raise ValueError("training split is empty")
    cfg.layout(train[0].features.dim if train[0].features is not None else 0)  # validates the layout
    net, history = build_policy(cfg.model.mode, train, cfg.ramp, cfg.dagger, cfg.train, cfg.pretrain,
                                cfg.model.hidden, cfg.model.feature_offsets, cfg.model.seed)
    Path(model_path).parent.mkdir(parents=True, exist_ok=True)
    approximator.save(net, model_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_history_csv(history, out / "history.csv")


def cmd_eval(cfg, data_dir, model_path, out_dir):
    from . import approximator
    from .config import ConfigError
    from .episodes import ExperimentMode
    from .evaluation import evaluate

    net = approximator.load(model_path)
    if net.layout.mode != ExperimentMode(cfg.model.mode):
        raise ConfigError(f"model was trained for {net.layout.mode.value}, config asks for {cfg.model.mode}")
    episodes, manifest = load_dataset(data_dir)
    report = evaluate(net, _split(episodes, manifest, "validation"), _split(episodes, manifest, "test"),
                      list(cfg.thresholds), cfg.ramp)
    report.write(out_dir)
    sys.stdout.write(report.summary())


def _frame_list(image_dir, manifest):
    """[(epoch, path)] from a manifest ("<epoch> <path>" lines) or <epoch>.ppm file names."""

    frames = []
    if manifest is not None:
        base = Path(manifest).parent
        with open(manifest) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{manifest}: line {lineno}: expected '<epoch> <path>'")
                frames.append((float(parts[0]), base / parts[1]))
        epochs = [e for e, _ in frames]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"{manifest}: frames must be listed in strictly increasing timestamp order")
        return frames
    for p in Path(image_dir).glob("*.ppm"):
        try:
            frames.append((float(p.stem), p))
        except ValueError:
            raise ValueError(f"{p.name}: image names must be <epoch seconds>.ppm") from None
    return sorted(frames)


def cmd_preprocess(cfg, image_dir, mask_path, out_dir, manifest=None):
    from . import imgpre

    img_cfg = cfg.images
    geom = imgpre.FisheyeGeometry(img_cfg.cx, img_cfg.cy, img_cfg.radius, img_cfg.rotation_deg, img_cfg.mirrored)
    mask = imgpre.read_mask_pgm(mask_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = imgpre.ColorStabilizerState()
    done = 0
    for epoch, path in _frame_list(image_dir, manifest):
        try:
            center = imgpre.sun_pixel(epoch, img_cfg.latitude, img_cfg.longitude, geom)
        except imgpre.SunBelowHorizon as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        img = imgpre.read_ppm(path)
        result, state = imgpre.preprocess_frame(img, mask, state, center, img_cfg.crop_size)
        imgpre.write_ppm(out / f"{path.stem}.ppm", result)
        done += 1
    log.info("preprocessed %d frames into %s", done, out)


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ramplight", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. dagger.epochs=10")
        return sp

    sp = add("gen-data", "generate a synthetic dataset")
    sp.add_argument("--out", help="output directory (default: paths.data_dir)")
    sp = add("optimal", "hindsight-optimal and baseline trajectories with throughputs")
    sp.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    sp.add_argument("--out", help="output directory (default: paths.out_dir)")
    sp = add("train", "pretrain and train a policy")
    sp.add_argument("--data")
    sp.add_argument("--model", help="model file to write (default: paths.model)")
    sp.add_argument("--out", help="directory for history.csv (default: paths.out_dir)")
    sp = add("eval", "threshold sweep, calibration and test report")
    sp.add_argument("--data")
    sp.add_argument("--model")
    sp.add_argument("--out")
    sp = add("preprocess", "sky image preprocessing")
    sp.add_argument("--images", help="directory of <epoch>.ppm frames")
    sp.add_argument("--manifest", help="file of '<epoch> <path>' lines, in timestamp order")
    sp.add_argument("--mask", required=True, help="PGM mask, 0 = masked out")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    _limit_threads()

    from .approximator import ModelFormatError
    from .config import ConfigError, load_config
    from .evaluation import DegenerateEpisodeSet
    from .imgpre import ImageFormatError
    from .timeseries import DataFormatError

    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    paths = cfg.paths
    data = getattr(args, "data", None) or paths.data_dir
    out = args.out or paths.out_dir
    model = getattr(args, "model", None) or paths.model
    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out or paths.data_dir)
        elif args.command == "optimal":
            cmd_optimal(cfg, data, out)
        elif args.command == "train":
            cmd_train(cfg, data, model, out)
        elif args.command == "eval":
            cmd_eval(cfg, data, model, out)
        elif args.command == "preprocess":
            if not args.images and not args.manifest:
                raise ConfigError("preprocess needs --images or --manifest")
            cmd_preprocess(cfg, args.images, args.mask, out, args.manifest)
    except (OSError, DataFormatError, ImageFormatError, ModelFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, DegenerateEpisodeSet) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
