"""Irradiance episodes: containers, synthetic generation, CSV I/O, splits and scaling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DataFormatError(ValueError):
    """Raised when an input file violates the expected CSV layout."""


@dataclass
class IrradianceSeries:
    values: np.ndarray
    dt: float = 7.0
    start_time: float = 0.0
    day_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or len(self.values) < 2:
            raise ValueError("an irradiance series needs at least two samples")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("irradiance values must be finite")
        if np.any(self.values < 0):
            raise ValueError("negative irradiance")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return len(self.values)

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(len(self.values))


@dataclass
class FeatureSeries:
    values: np.ndarray  # shape (T, F)
    lead_times: tuple[float, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("feature values must be a (T, F) array")
        if self.lead_times and len(self.lead_times) != self.values.shape[1]:
            raise ValueError("one lead time per feature column expected")
        self.lead_times = tuple(float(x) for x in self.lead_times)

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class SyntheticConfig:
    day_length: float = 4 * 3600.0
    dt: float = 7.0
    clearsky_peak: float = 1000.0
    cloud_event_rate: float = 3.0
    occlusion_depth: tuple[float, float] = (0.3, 0.8)
    edge_duration: tuple[float, float] = (20.0, 120.0)
    event_duration: tuple[float, float] = (60.0, 600.0)
    measurement_noise_sigma: float = 2.0
    feature_noise_sigma: float = 0.02
    feature_lead_times: tuple[float, ...] = (0.0, 60.0, 120.0, 300.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("occlusion_depth", "edge_duration", "event_duration"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))
        lo, hi = self.occlusion_depth
        if lo <= 0 or hi > 1:
            raise ValueError("occlusion_depth must lie in (0, 1]")
        if self.edge_duration[0] < 0 or self.event_duration[0] < 0:
            raise ValueError("durations must be non-negative")
        if self.cloud_event_rate < 0:
            raise ValueError("cloud_event_rate must be >= 0")
        if self.measurement_noise_sigma < 0 or self.feature_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.day_length <= 0 or self.dt <= 0 or self.day_length < self.dt:
            raise ValueError("day_length and dt must be positive with day_length >= dt")
        self.feature_lead_times = tuple(float(x) for x in self.feature_lead_times)


@dataclass(frozen=True)
class CloudEvent:
    """A trapezoidal dip: linear fall over `edge`, flat for `duration`, linear recovery."""

    start: float  # seconds since dawn
    depth: float
    edge: float
    duration: float

    def shape(self, t):
        t = np.asarray(t, dtype=float) - self.start
        if self.edge > 0:
            rise = np.clip(t / self.edge, 0.0, 1.0)
            fall = np.clip((self.edge * 2 + self.duration - t) / self.edge, 0.0, 1.0)
        else:
            rise = (t >= 0).astype(float)
            fall = (t <= self.duration).astype(float)
        return np.minimum(rise, fall)


MIN_OCCLUSION = 1e-3


def clear_sky(t, config: SyntheticConfig):
    """Half-sine envelope over the day; `t` is seconds since dawn."""
    t = np.asarray(t, dtype=float)
    x = np.clip(t / config.day_length, 0.0, 1.0)
    return config.clearsky_peak * np.sin(np.pi * x)


def occlusion_factor(t, events: Sequence[CloudEvent]):
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    for ev in events:
        out = out * (1.0 - ev.depth * ev.shape(t))
    return np.maximum(out, MIN_OCCLUSION)


def sample_cloud_events(config: SyntheticConfig, rng: np.random.Generator) -> list[CloudEvent]:
    expected = config.cloud_event_rate * config.day_length / 3600.0
    n = rng.poisson(expected) if expected > 0 else 0
    events = []
    for _ in range(n):
        events.append(CloudEvent(
            start=float(rng.uniform(0.0, config.day_length)),
            depth=float(rng.uniform(*config.occlusion_depth)),
            edge=float(rng.uniform(*config.edge_duration)),
            duration=float(rng.uniform(*config.event_duration)),
        ))
    events.sort(key=lambda e: e.start)
    return events


def generate_synthetic(config: SyntheticConfig, day_id: int = 0, start_time: float = 0.0,
                       events: Sequence[CloudEvent] | None = None):
    """Generate one synthetic day and its advance-warning feature channel.

    Irradiance is the clear-sky half-sine times the occlusion factor of the cloud
    events, plus Gaussian noise truncated at zero. Feature column ``k`` is a noisy
    copy of the occlusion factor ``feature_lead_times[k]`` seconds ahead, clipped
    to [0, 1]; leads past the end of the day read the last sample's occlusion.

    Passing ``events`` overrides the random cloud process (noise is still drawn).
    """
    rng = np.random.default_rng(config.seed)
    n = int(math.floor(config.day_length / config.dt + 1e-9)) + 1
    t = config.dt * np.arange(n)
    if events is None:
        events = sample_cloud_events(config, rng)
    occl = occlusion_factor(t, events)
    irr = clear_sky(t, config) * occl
    if config.measurement_noise_sigma > 0:
        irr = irr + rng.normal(0.0, config.measurement_noise_sigma, size=n)
    irr = np.maximum(irr, 0.0)

    t_end = t[-1]
    cols = []
    for lead in config.feature_lead_times:
        f = occlusion_factor(np.minimum(t + lead, t_end), events)
        if config.feature_noise_sigma > 0:
            f = f + rng.normal(0.0, config.feature_noise_sigma, size=n)
        cols.append(np.clip(f, 0.0, 1.0))
    feats = np.stack(cols, axis=1) if cols else np.zeros((n, 0))
    series = IrradianceSeries(irr, dt=config.dt, start_time=start_time, day_id=day_id)
    return series, FeatureSeries(feats, config.feature_lead_times)


def generate_days(config: SyntheticConfig, n_days: int, first_start: float = 6 * 3600.0):
    """Generate ``n_days`` independent days; day ``d`` is seeded from (seed, d)."""
    if n_days <= 0:
        raise ValueError("n_days must be positive")
    days = []
    for d in range(n_days):
        day_seed = int(np.random.SeedSequence([config.seed, d]).generate_state(1)[0])
        cfg = SyntheticConfig(**{**config.__dict__, "seed": day_seed})
        days.append(generate_synthetic(cfg, day_id=d, start_time=first_start + 86400.0 * d))
    return days


# --- CSV ---------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_csv(series: IrradianceSeries, path):
    with open(path, "w", newline="") as fh:
        for t, v in zip(series.times, series.values):
            fh.write(f"{_fmt(t)},{_fmt(v)}\n")


def _check_uniform(times: list[float], lines: list[int]):
    dt = times[1] - times[0]
    if not dt > 0:
        raise DataFormatError(f"line {lines[1]}: timestamps must be strictly increasing")
    tol = 1e-6 * max(1.0, abs(dt))
    for i in range(2, len(times)):
        if abs((times[i] - times[i - 1]) - dt) > tol:
            raise DataFormatError(f"line {lines[i]}: non-uniform timestamp")
    return dt


def load_csv(path, day_id: int = 0) -> IrradianceSeries:
    times, values, lines = [], [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DataFormatError(f"line {lineno}: expected 'epoch_seconds,irradiance'")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise DataFormatError(f"line {lineno}: unparsable number") from None
            if v < 0:
                raise DataFormatError(f"line {lineno}: negative irradiance")
            times.append(t)
            values.append(v)
            lines.append(lineno)
    if len(times) < 2:
        raise DataFormatError(f"{path}: need at least two rows")
    dt = _check_uniform(times, lines)
    return IrradianceSeries(np.array(values), dt=dt, start_time=times[0], day_id=day_id)


def features_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".features.csv")


def save_features(features: FeatureSeries, series: IrradianceSeries, path):
    with open(path, "w", newline="") as fh:
        fh.write("# lead_times," + ",".join(_fmt(x) for x in features.lead_times) + "\n")
        for t, row in zip(series.times, features.values):
            fh.write(",".join([_fmt(t)] + [_fmt(x) for x in row]) + "\n")


def load_features(path, series: IrradianceSeries | None = None) -> FeatureSeries:
    leads: tuple[float, ...] = ()
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if row[0].startswith("#"):
                if row[0].strip() == "# lead_times":
                    leads = tuple(float(x) for x in row[1:])
                continue
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError:
                raise DataFormatError(f"line {lineno}: unparsable number") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataFormatError(f"{path}: inconsistent feature dimension")
    values = np.array(rows, dtype=float).reshape(len(rows), widths.pop() if widths else 0)
    if series is not None and len(values) != len(series):
        raise DataFormatError(f"{path}: {len(values)} feature rows for {len(series)} samples")
    return FeatureSeries(values, leads)


# --- splits & scaling -------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)


def split_days(day_ids: Sequence[int], ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    ids = list(day_ids)
    n = len(ids)
    if n < 3:
        raise ValueError("need at least 3 days to split")
    if len(set(ids)) != n:
        raise ValueError("duplicate day ids")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    a = math.floor(ratios[0] * n + 1e-9)
    b = math.floor((ratios[0] + ratios[1]) * n + 1e-9)
    return DatasetSplit(shuffled[:a], shuffled[a:b], shuffled[b:], tuple(ratios))


@dataclass(frozen=True)
class NormalizationSpec:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError("normalization needs max > min")

    @classmethod
    def from_series(cls, series: Sequence[IrradianceSeries]) -> "NormalizationSpec":
        lo = min(float(s.values.min()) for s in series)
        hi = max(float(s.values.max()) for s in series)
        return cls(lo, hi)


def normalize(values, spec: NormalizationSpec):
    # deliberately unclipped: test-time values outside the training range keep their information
    return (np.asarray(values, dtype=float) - spec.min) / (spec.max - spec.min)


def denormalize(values, spec: NormalizationSpec):
    return np.asarray(values, dtype=float) * (spec.max - spec.min) + spec.min
