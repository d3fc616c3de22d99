"""Run configuration: nested dataclasses loaded from JSON with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .approximator import TrainConfig
from .control import RampSpec
from .episodes import DEFAULT_FEATURE_OFFSETS, ExperimentMode, ObservationLayout
from .evaluation import DEFAULT_THRESHOLDS
from .imitation import DaggerSchedule
from .timeseries import SyntheticConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_days: int = 60
    first_start: float = 6 * 3600.0
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class ModelSection:
    mode: str = ExperimentMode.FUTURE_IRRADIANCE.value
    hidden: tuple[int, ...] = (128, 64, 16)
    feature_offsets: tuple[float, ...] | None = None
    seed: int = 0


@dataclass
class PathsSection:
    data_dir: str = "data"
    model: str = "model.txt"
    out_dir: str = "out"


@dataclass
class ImageSection:
    latitude: float = 0.0
    longitude: float = 0.0
    cx: float = 783.0
    cy: float = 783.0
    radius: float = 760.0
    rotation_deg: float = 0.0
    mirrored: bool = True
    crop_size: int = 448


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    ramp: RampSpec = field(default_factory=RampSpec)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5))
    train: TrainConfig = field(default_factory=TrainConfig)
    dagger: DaggerSchedule = field(default_factory=DaggerSchedule)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    paths: PathsSection = field(default_factory=PathsSection)
    images: ImageSection = field(default_factory=ImageSection)

    def layout(self, feature_dim: int) -> ObservationLayout:
        mode = ExperimentMode(self.model.mode)
        if mode == ExperimentMode.FUTURE_IRRADIANCE:
            feature_dim = 0
        return ObservationLayout(mode, feature_dim, self.model.feature_offsets)

    def validate(self):
        try:
            mode = ExperimentMode(self.model.mode)
        except ValueError:
            raise ConfigError(f"unknown mode {self.model.mode!r}") from None
        if mode == ExperimentMode.FUTURE_IRRADIANCE and self.model.feature_offsets:
            raise ConfigError("FutureIrradiance takes no feature slots; drop model.feature_offsets")
        offsets = self.model.feature_offsets or DEFAULT_FEATURE_OFFSETS[mode]
        if mode == ExperimentMode.PAST_DATA and max(offsets) > 0:
            raise ConfigError("PastData may only read past or current features")
        if self.ramp.dt != self.data.synthetic.dt:
            raise ConfigError("ramp.dt must equal data.synthetic.dt")
        if not self.thresholds:
            raise ConfigError("thresholds must not be empty")
        if self.data.n_days < 3:
            raise ConfigError("data.n_days must be at least 3")
        return self


def _build(cls, raw, path=""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if _constructible(cls) else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _constructible(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values parse as JSON, else as plain strings."""
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(value)
    return raw


def load_config(path=None, overrides=()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    apply_overrides(raw, overrides)
    return _build(RunConfig, raw).validate()


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")
