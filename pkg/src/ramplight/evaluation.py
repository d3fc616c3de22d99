"""Evaluation protocol: normalized improvement, gated rollouts, sweeps, calibration."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .approximator import PolicyNetwork, TrainConfig, forward, gate_batch
from .control import Action, RampSpec, Trajectory, baseline_rollout, hindsight_optimal, optimal_label, throughput
from .episodes import Episode, ExperimentMode, ObservationLayout, lockstep_rollout, observation_matrix
from .imitation import DaggerSchedule, EpochRecord, behavior_clone, dagger_train, pretrain
from .timeseries import NormalizationSpec, SyntheticConfig, generate_days, split_days

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.35 + 0.05 * k, 2) for k in range(14))
CALIBRATION_BINS = 10


class DegenerateEpisodeSet(ValueError):
    """Baseline and optimum coincide, so improvement is undefined."""


def improvement(j_base: float, j_opt: float, j_policy: float) -> float:
    """Percent of the baseline-to-optimum throughput gap closed by the policy."""
    if not j_base > j_opt:
        raise DegenerateEpisodeSet(f"baseline throughput {j_base} does not exceed optimum {j_opt}")
    return 100.0 * (j_base - j_policy) / (j_base - j_opt)


def _check_mode(net: PolicyNetwork, mode):
    if mode is not None and ExperimentMode(mode) != net.layout.mode:
        raise ValueError(f"network expects {net.layout.mode.value} observations, not {ExperimentMode(mode).value}")


def gated_rollouts(net: PolicyNetwork, episodes: Sequence[Episode], thresholds: Sequence[float],
                   ramp: RampSpec) -> list[list[Trajectory]]:
    """Trajectories for every (threshold, episode) pair, simulated in lock step."""
    statics = [observation_matrix(net.layout, ep, net.normalization) for ep in episodes]
    E = len(episodes)
    reps = [ep for _ in thresholds for ep in episodes]
    ids = [i for _ in thresholds for i in range(E)]
    row_threshold = np.repeat(np.asarray(thresholds, dtype=float), E)

    def chooser(t, Xt, u_prev, rows):
        return gate_batch(forward(net, Xt), row_threshold[rows])

    results = lockstep_rollout(reps, statics, net.layout.prev_index, net.normalization, ramp, chooser, ids)
    out = []
    for k in range(len(thresholds)):
        row = []
        for r in results[k * E:(k + 1) * E]:
            row.append(Trajectory(r.u, r.u0, r.actions, r.confidences, r.actions != Action.TRACK))
        out.append(row)
    return out


def rollout_policy(net: PolicyNetwork, episode: Episode, mode, threshold: float, ramp: RampSpec) -> Trajectory:
    """Gated policy on one episode; the baseline acts whenever confidence <= threshold."""
    _check_mode(net, mode)
    return gated_rollouts(net, [episode], [threshold], ramp)[0][0]


def deviation_stats(traj: Trajectory, episode: Episode, ramp: RampSpec) -> dict:
    """Share of steps deviating from Track, and of those judged good.

    A deviation is good if it is the hindsight-optimal label at the policy's own
    state, or if it lands closer than Track would to that state's optimal output.
    """
    if traj.deviated is None:
        raise ValueError("trajectory carries no deviation flags")
    table = episode.table(ramp)
    s = episode.s
    T = len(traj)
    good = 0
    steps = np.flatnonzero(traj.deviated)
    for t in steps:
        u_prev = traj.u0 if t == 0 else float(traj.u[t - 1])
        label, u_star = optimal_label(table, int(t), u_prev)
        taken = float(traj.u[t])
        track = min(max(s[t], max(0.0, u_prev - ramp.budget)), u_prev + ramp.budget)
        if int(traj.actions[t]) == label or abs(taken - u_star) < abs(track - u_star):
            good += 1
    return {"deviating_pct": 100.0 * len(steps) / T, "good_pct": 100.0 * good / T,
            "deviating": int(len(steps)), "good": int(good), "steps": int(T)}


@dataclass
class EpisodeCosts:
    day_id: int
    j_base: float
    j_opt: float


def reference_costs(episodes: Sequence[Episode], ramp: RampSpec) -> list[EpisodeCosts]:
    out = []
    for ep in episodes:
        base = baseline_rollout(ep.series, ep.u0, ramp).u
        opt = hindsight_optimal(ep.series, ep.u0, ramp, table=ep.table(ramp)).u
        out.append(EpisodeCosts(ep.series.day_id, throughput(ep.s, base, ramp.dt), throughput(ep.s, opt, ramp.dt)))
    return out


@dataclass
class SweepRow:
    threshold: float
    j_policy: float
    j_base: float
    j_opt: float
    improvement: float
    deviating_pct: float
    good_pct: float
    deviating: int


def threshold_sweep(net: PolicyNetwork, episodes: Sequence[Episode], thresholds: Sequence[float],
                    mode, ramp: RampSpec, costs: Sequence[EpisodeCosts] | None = None,
                    trajectories: list | None = None) -> list[SweepRow]:
    if not len(thresholds):
        raise ValueError("no thresholds given")
    _check_mode(net, mode)
    costs = costs if costs is not None else reference_costs(episodes, ramp)
    j_base = sum(c.j_base for c in costs)
    j_opt = sum(c.j_opt for c in costs)
    trajs = gated_rollouts(net, episodes, thresholds, ramp)
    if trajectories is not None:
        trajectories.extend(trajs)
    rows = []
    for th, row in zip(thresholds, trajs):
        j_pol = sum(throughput(ep.s, tr.u, ramp.dt) for ep, tr in zip(episodes, row))
        stats = [deviation_stats(tr, ep, ramp) for ep, tr in zip(episodes, row)]
        steps = sum(st["steps"] for st in stats)
        dev = sum(st["deviating"] for st in stats)
        good = sum(st["good"] for st in stats)
        rows.append(SweepRow(float(th), j_pol, j_base, j_opt, improvement(j_base, j_opt, j_pol),
                             100.0 * dev / steps, 100.0 * good / steps, dev))
    return rows


def select_threshold(rows: Sequence[SweepRow]) -> SweepRow:
    """Best improvement; ties go to the higher (more conservative) threshold."""
    return max(rows, key=lambda r: (r.improvement, r.threshold))


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    share: float
    mean_confidence: float
    accuracy: float


def calibration(net: PolicyNetwork, X, labels, bins: int = CALIBRATION_BINS) -> list[CalibrationBin]:
    """Reliability histogram of max-probability confidence on [1/3, 1]."""
    probs = forward(net, np.atleast_2d(X))
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    edges = np.linspace(1 / 3, 1.0, bins + 1)
    which = np.clip(np.floor((conf - 1 / 3) / (2 / 3) * bins).astype(int), 0, bins - 1)
    n = len(conf)
    out = []
    for b in range(bins):
        m = which == b
        k = int(m.sum())
        out.append(CalibrationBin(float(edges[b]), float(edges[b + 1]), k, k / n,
                                  float(conf[m].mean()) if k else float("nan"),
                                  float((pred[m] == labels[m]).mean()) if k else float("nan")))
    return out


def visited_states(net: PolicyNetwork, episodes: Sequence[Episode], trajectories: Sequence[Trajectory],
                   ramp: RampSpec):
    """Observations and hindsight labels along given policy trajectories."""
    Xs, ys = [], []
    norm = net.normalization
    for ep, tr in zip(episodes, trajectories):
        X = observation_matrix(net.layout, ep, norm)
        prev = np.r_[tr.u0, tr.u[:-1]]
        X[:, net.layout.prev_index] = (prev - norm.min) / (norm.max - norm.min)
        table = ep.table(ramp)
        ys.append(np.array([optimal_label(table, t, float(p))[0] for t, p in enumerate(prev)]))
        Xs.append(X)
    return np.concatenate(Xs), np.concatenate(ys)


# --- experiment driver --------------------------------------------------------------------

@dataclass
class EvalReport:
    mode: ExperimentMode
    selected_threshold: float
    validation_sweep: list[SweepRow]
    test_sweep: list[SweepRow]
    test_at_selected: SweepRow
    calibration: list[CalibrationBin]
    episode_rows: list[dict]
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def improvement(self) -> float:
        return self.test_at_selected.improvement

    def summary(self) -> str:
        r = self.test_at_selected
        lines = [
            f"mode: {self.mode.value}",
            f"test episodes: {len(self.episode_rows)}",
            f"selected threshold (validation): {self.selected_threshold:.2f}",
            "policy               improvement   throughput",
            f"optimal              {100.0:10.2f}%   {r.j_opt:.6e}",
            f"policy               {r.improvement:10.2f}%   {r.j_policy:.6e}",
            f"baseline             {0.0:10.2f}%   {r.j_base:.6e}",
            f"deviating actions: {r.deviating_pct:.2f}% of steps, good: {r.good_pct:.2f}%",
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in (("sweep_validation.csv", self.validation_sweep), ("sweep_test.csv", self.test_sweep)):
            write_sweep_csv(rows, out / name)
        with open(out / "calibration.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count", "share", "mean_confidence", "accuracy"])
            for b in self.calibration:
                w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.share), repr(b.mean_confidence), repr(b.accuracy)])
        with open(out / "episodes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day_id", "j_base", "j_opt", "j_policy"])
            for row in self.episode_rows:
                w.writerow([row["day_id"], repr(row["j_base"]), repr(row["j_opt"]), repr(row["j_policy"])])
        (out / "summary.txt").write_text(self.summary())


def write_sweep_csv(rows: Sequence[SweepRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "improvement_pct", "j_policy", "j_base", "j_opt",
                    "deviating_pct", "good_pct", "deviating"])
        for r in rows:
            w.writerow([repr(r.threshold), repr(r.improvement), repr(r.j_policy), repr(r.j_base),
                        repr(r.j_opt), repr(r.deviating_pct), repr(r.good_pct), r.deviating])


def evaluate(net: PolicyNetwork, validation: Sequence[Episode], test: Sequence[Episode],
             thresholds: Sequence[float], ramp: RampSpec, history=None) -> EvalReport:
    """Pick the threshold on validation, then report test performance and calibration."""
    val_trajs: list = []
    val_sweep = threshold_sweep(net, validation, thresholds, None, ramp, trajectories=val_trajs)
    best = select_threshold(val_sweep)
    k = val_sweep.index(best)
    Xc, yc = visited_states(net, validation, val_trajs[k], ramp)
    calib = calibration(net, Xc, yc)
    test_costs = reference_costs(test, ramp)
    test_trajs: list = []
    test_sweep = threshold_sweep(net, test, list(thresholds), None, ramp, costs=test_costs, trajectories=test_trajs)
    at = test_sweep[k]
    rows = [{"day_id": c.day_id, "j_base": c.j_base, "j_opt": c.j_opt,
             "j_policy": throughput(ep.s, tr.u, ramp.dt)}
            for c, ep, tr in zip(test_costs, test, test_trajs[k])]
    return EvalReport(net.layout.mode, best.threshold, val_sweep, test_sweep, at, calib, rows, history or [])


def build_policy(mode: ExperimentMode, train: Sequence[Episode], ramp: RampSpec, schedule: DaggerSchedule,
                 train_config: TrainConfig, pretrain_config: TrainConfig | None = None,
                 hidden=(128, 64, 16), feature_offsets=None, net_seed: int = 0, trainer: str = "dagger"):
    """Normalize on the training split, optionally pretrain, then run DAgger (or plain cloning)."""
    if trainer not in ("dagger", "bc"):
        raise ValueError(f"unknown trainer {trainer!r}")
    mode = ExperimentMode(mode)
    norm = NormalizationSpec.from_series([ep.series for ep in train])
    if mode == ExperimentMode.FUTURE_IRRADIANCE:
        feature_dim = 0
    elif train[0].features is None:
        raise ValueError(f"{mode.value} needs per-step features")
    else:
        feature_dim = train[0].features.dim
    layout = ObservationLayout(mode, feature_dim, feature_offsets)
    use_pretrain = mode != ExperimentMode.FUTURE_IRRADIANCE and pretrain_config is not None
    net = PolicyNetwork.create(layout, norm, hidden=hidden, seed=net_seed, aux_heads=use_pretrain)
    if use_pretrain:
        pretrain(net, train, pretrain_config, ramp)
        net.drop_aux_heads()
    if trainer == "bc":
        return behavior_clone(net, train, train_config, ramp, epochs=schedule.epochs), []
    net, history, _ = dagger_train(net, train, schedule, train_config, ramp)
    return net, history


def episodes_from_days(days) -> list[Episode]:
    return [Episode(series, feats) for series, feats in days]


def run_experiment(mode, data_config: SyntheticConfig, n_days: int, schedule: DaggerSchedule,
                   train_config: TrainConfig, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                   ramp: RampSpec | None = None, pretrain_config: TrainConfig | None = None,
                   split_seed: int = 0, hidden=(128, 64, 16), feature_offsets=None,
                   net_seed: int = 0, trainer: str = "dagger") -> EvalReport:
    """Generate data, split 70/15/15, train, select the threshold on validation, report on test."""
    ramp = ramp or RampSpec(dt=data_config.dt)
    episodes = episodes_from_days(generate_days(data_config, n_days))
    split = split_days(range(n_days), seed=split_seed)
    pick = lambda ids: [episodes[i] for i in ids]
    net, history = build_policy(mode, pick(split.train), ramp, schedule, train_config,
                                pretrain_config, hidden, feature_offsets, net_seed, trainer)
    return evaluate(net, pick(split.validation), pick(split.test), thresholds, ramp, history)
