"""Experiment modes, observation layouts and lock-step batched rollouts."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .control import Action, HindsightTable, RampSpec, hindsight_table
from .timeseries import FeatureSeries, IrradianceSeries, NormalizationSpec, normalize

IRRADIANCE_HISTORY = 5  # previous samples next to the current one
FUTURE_SPACING = 15.0
FUTURE_COUNT = 60


class ExperimentMode(str, Enum):
    FUTURE_IRRADIANCE = "FutureIrradiance"
    FUTURE_FEATURES = "FutureFeatures"
    PAST_DATA = "PastData"


DEFAULT_FEATURE_OFFSETS = {
    ExperimentMode.FUTURE_IRRADIANCE: (),
    ExperimentMode.FUTURE_FEATURES: (0.0, 30.0, 60.0, 120.0, 300.0, 600.0),
    ExperimentMode.PAST_DATA: (0.0, -30.0, -60.0),
}


@dataclass(frozen=True)
class ObservationLayout:
    """Slot layout of the policy input for one experiment mode.

    ``feature_offsets`` are the seconds (relative to now) at which the
    per-step feature vectors are read; past-data layouts only look backwards.
    """

    mode: ExperimentMode
    feature_dim: int = 0
    feature_offsets: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ExperimentMode(self.mode))
        offsets = self.feature_offsets
        if offsets is None:
            offsets = DEFAULT_FEATURE_OFFSETS[self.mode]
        offsets = tuple(float(x) for x in offsets)
        object.__setattr__(self, "feature_offsets", offsets)
        if self.mode == ExperimentMode.FUTURE_IRRADIANCE:
            if offsets or self.feature_dim:
                raise ValueError("FutureIrradiance observations carry no feature slots")
        else:
            if not offsets or self.feature_dim <= 0:
                raise ValueError(f"{self.mode.value} observations need feature offsets and features")
            if self.mode == ExperimentMode.PAST_DATA and max(offsets) > 0:
                raise ValueError("PastData observations may only read past or current features")

    @property
    def slots(self) -> tuple[tuple[str, int], ...]:
        out = [("irradiance_window", IRRADIANCE_HISTORY + 1), ("prev_output", 1)]
        if self.mode == ExperimentMode.FUTURE_IRRADIANCE:
            out.append(("future_irradiance", FUTURE_COUNT))
        else:
            out.append(("feature_block", self.feature_dim * len(self.feature_offsets)))
        return tuple(out)

    @property
    def dim(self) -> int:
        return sum(d for _, d in self.slots)

    @property
    def prev_index(self) -> int:
        return IRRADIANCE_HISTORY + 1


@dataclass
class Episode:
    series: IrradianceSeries
    features: FeatureSeries | None = None
    _tables: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.series)

    @property
    def s(self) -> np.ndarray:
        return self.series.values

    @property
    def u0(self) -> float:
        return float(self.series.values[0])

    def table(self, ramp: RampSpec) -> HindsightTable:
        if ramp not in self._tables:
            self._tables[ramp] = hindsight_table(self.series, ramp)
        return self._tables[ramp]


def observation_matrix(layout: ObservationLayout, episode: Episode, norm: NormalizationSpec) -> np.ndarray:
    """(T, dim) observations for every step; the prev_output column is left at 0."""
    s = episode.s
    T = len(s)
    idx = np.arange(T)
    cols = [normalize(s[np.maximum(idx - k, 0)], norm)[:, None] for k in range(IRRADIANCE_HISTORY + 1)]
    cols.append(np.zeros((T, 1)))
    if layout.mode == ExperimentMode.FUTURE_IRRADIANCE:
        dt = episode.series.dt
        pos = idx[:, None] + (FUTURE_SPACING / dt) * np.arange(1, FUTURE_COUNT + 1)[None, :]
        # linear interpolation on the sample grid; beyond the end holds the last value
        fut = np.interp(pos.ravel(), idx, s).reshape(T, FUTURE_COUNT)
        cols.append(normalize(fut, norm))
    else:
        feats = episode.features
        if feats is None or feats.dim != layout.feature_dim:
            have = None if feats is None else feats.dim
            raise ValueError(f"layout expects {layout.feature_dim} features per step, episode has {have}")
        for off in layout.feature_offsets:
            shift = int(round(off / episode.series.dt))
            cols.append(feats.values[np.clip(idx + shift, 0, T - 1)])
    return np.concatenate(cols, axis=1)


def apply_actions_vec(u_prev: np.ndarray, s_t: np.ndarray, actions: np.ndarray, r: float) -> np.ndarray:
    """Vectorized control.apply_action; identical floating-point results."""
    lo = np.maximum(0.0, u_prev - r)
    hi = u_prev + r
    track = np.minimum(np.maximum(s_t, lo), hi)
    return np.where(actions == Action.TRACK, track, np.where(actions == Action.UP, hi, lo))


@dataclass
class RolloutResult:
    u: np.ndarray
    actions: np.ndarray
    confidences: np.ndarray | None
    u0: float


# chooser(t, X_t, u_prev, rows) -> (actions, confidences or None); rows index the batch members
Chooser = Callable[[int, np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray | None]]


def lockstep_rollout(episodes: Sequence[Episode], statics: Sequence[np.ndarray], prev_index: int,
                     norm: NormalizationSpec, ramp: RampSpec, chooser: Chooser,
                     static_ids: Sequence[int] | None = None) -> list[RolloutResult]:
    """Roll several episodes forward together, one batched decision per step.

    ``statics[static_ids[i]]`` holds the observation matrix of ``episodes[i]``
    (identity mapping by default), so repeated episodes share one matrix.
    Episodes are grouped by length; results come back in input order.
    """
    if static_ids is None:
        static_ids = range(len(episodes))
    static_ids = list(static_ids)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, ep in enumerate(episodes):
        groups[len(ep)].append(i)
    results: list[RolloutResult | None] = [None] * len(episodes)
    r = ramp.budget
    for T, members in sorted(groups.items()):
        rows = np.array(members)
        S = np.stack([episodes[i].s for i in members])
        uniq = sorted({static_ids[i] for i in members})
        X = np.stack([statics[j] for j in uniq])
        sel = np.searchsorted(uniq, [static_ids[i] for i in members])
        u_prev = np.array([episodes[i].u0 for i in members])
        U = np.empty((len(members), T))
        A = np.empty((len(members), T), dtype=np.int64)
        C = None
        for t in range(T):
            Xt = X[sel, t, :]
            Xt[:, prev_index] = normalize(u_prev, norm)
            acts, conf = chooser(t, Xt, u_prev, rows)
            if conf is not None:
                if C is None:
                    C = np.empty((len(members), T))
                C[:, t] = conf
            u_prev = apply_actions_vec(u_prev, S[:, t], acts, r)
            U[:, t] = u_prev
            A[:, t] = acts
        for k, i in enumerate(members):
            results[i] = RolloutResult(U[k], A[k], None if C is None else C[k], episodes[i].u0)
    return results
