"""Ramp-constrained output control: baseline, three-action semantics, hindsight optimum.

The hindsight-optimal controller minimizes sum_t |u[t] - s[t]| subject to
|u[t] - u[t-1]| <= r (with u[-1] = u0) and u >= 0. It is solved exactly by a
backward dynamic program over convex piecewise-linear cost-to-go functions,
kept as two heaps of slope breakpoints. The pass yields, for every step t, the
minimizer interval [lo_t, hi_t] of |u - s[t]| + cost_to_go_{t+1}(u); the optimal
output from any state (t, u_prev) is then an O(1) projection. That table is what
makes DAgger labeling cheap.

`dp_oracle` is an independent brute-force check over a quantized output grid.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .timeseries import IrradianceSeries

FEAS_TOL = 1e-9
INTERVAL_TOL = 1e-9


class Action(IntEnum):
    TRACK = 0
    UP = 1
    DOWN = 2


@dataclass(frozen=True)
class RampSpec:
    rate_limit: float = 2.0 / 3.0  # W/m^2/s
    dt: float = 7.0

    def __post_init__(self):
        if not self.rate_limit > 0 or not self.dt > 0:
            raise ValueError("rate_limit and dt must be positive")

    @property
    def budget(self) -> float:
        """Largest allowed change of the output per step."""
        return self.rate_limit * self.dt


@dataclass
class Trajectory:
    u: np.ndarray
    u0: float
    actions: np.ndarray | None = None
    confidences: np.ndarray | None = None
    deviated: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)

    def __len__(self):
        return len(self.u)

    def max_step(self) -> float:
        return float(np.max(np.abs(np.diff(np.concatenate([[self.u0], self.u])))))

    def is_feasible(self, ramp: RampSpec, tol: float = FEAS_TOL) -> bool:
        return bool(np.all(self.u >= 0)) and self.max_step() <= ramp.budget + tol


def _values(series) -> np.ndarray:
    if isinstance(series, IrradianceSeries):
        return series.values
    return np.asarray(series, dtype=float)


def reach_interval(u_prev: float, ramp: RampSpec) -> tuple[float, float]:
    r = ramp.budget
    return max(0.0, u_prev - r), u_prev + r


def baseline_step(u_prev: float, s_t: float, ramp: RampSpec) -> float:
    lo, hi = reach_interval(u_prev, ramp)
    return min(max(s_t, lo), hi)


def apply_action(u_prev: float, s_t: float, action: Action, ramp: RampSpec) -> float:
    if action == Action.TRACK:
        return baseline_step(u_prev, s_t, ramp)
    if action == Action.UP:
        return u_prev + ramp.budget
    return max(0.0, u_prev - ramp.budget)


def baseline_rollout(series, u0: float | None, ramp: RampSpec) -> Trajectory:
    s = _values(series)
    u0 = float(s[0]) if u0 is None else float(u0)
    u = np.empty(len(s))
    prev = u0
    for t, st in enumerate(s):
        prev = baseline_step(prev, st, ramp)
        u[t] = prev
    n = len(s)
    return Trajectory(u, u0, actions=np.full(n, int(Action.TRACK)), deviated=np.zeros(n, dtype=bool))


def rollout_actions(series, actions, u0: float, ramp: RampSpec) -> Trajectory:
    s = _values(series)
    u = np.empty(len(s))
    prev = float(u0)
    for t, (st, a) in enumerate(zip(s, actions)):
        prev = apply_action(prev, st, Action(int(a)), ramp)
        u[t] = prev
    acts = np.asarray(actions, dtype=int)
    return Trajectory(u, float(u0), actions=acts, deviated=acts != Action.TRACK)


def objective(s, u) -> float:
    """Sum of absolute deviations, the unweighted form of the throughput."""
    s, u = np.asarray(s, dtype=float), np.asarray(u, dtype=float)
    if s.shape != u.shape:
        raise ValueError("length mismatch between s and u")
    return float(np.sum(np.abs(u - s)))


def throughput(s, u, dt: float) -> float:
    """Left Riemann sum of |u - s| with step dt (W s / m^2)."""
    return objective(s, u) * dt


# --- hindsight optimum --------------------------------------------------------

@dataclass
class HindsightTable:
    """Per-step minimizer intervals of the stage-plus-cost-to-go function."""

    s: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    ramp: RampSpec

    def __len__(self):
        return len(self.s)

    def optimal_output(self, t: int, u_prev: float) -> float:
        """Optimal output at step t given u[t-1] = u_prev.

        Among optimal outputs the one closest to the baseline step is returned,
        so plateaus resolve toward tracking.
        """
        lo, hi = reach_interval(u_prev, self.ramp)
        base = min(max(self.s[t], lo), hi)
        # breakpoints carry offset round-off; don't let it move an optimal base step
        if self.lo[t] - INTERVAL_TOL <= base <= self.hi[t] + INTERVAL_TOL:
            return base
        x = min(max(base, self.lo[t]), self.hi[t])
        return min(max(x, lo), hi)

    def rollout(self, u_prev: float, t_start: int = 0) -> np.ndarray:
        u = np.empty(len(self.s) - t_start)
        for i, t in enumerate(range(t_start, len(self.s))):
            u_prev = self.optimal_output(t, u_prev)
            u[i] = u_prev
        return u


def hindsight_table(series, ramp: RampSpec) -> HindsightTable:
    s = _values(series)
    n = len(s)
    r = ramp.budget
    # left heap is a max-heap stored negated; stored value v means v + offset
    left: list[float] = []
    right: list[float] = []
    lo = np.empty(n)
    hi = np.empty(n)
    widen = 0  # number of window operations applied so far
    for t in range(n - 1, -1, -1):
        off = widen * r
        x = s[t]
        # add max(0, u - x)
        heapq.heappush(left, -(x + off))
        y = -heapq.heappop(left) - off
        heapq.heappush(right, y - off)
        # add max(0, x - u)
        heapq.heappush(right, x - off)
        y = heapq.heappop(right) + off
        heapq.heappush(left, -(y + off))
        lo[t] = -left[0] - off
        hi[t] = right[0] + off
        widen += 1
    return HindsightTable(s.copy(), lo, hi, ramp)


def hindsight_optimal(series, u0: float | None, ramp: RampSpec,
                      table: HindsightTable | None = None) -> Trajectory:
    s = _values(series)
    u0 = float(s[0]) if u0 is None else float(u0)
    table = table if table is not None else hindsight_table(s, ramp)
    return Trajectory(table.rollout(u0), u0)


def hindsight_optimal_from(series, t_start: int, u_prev: float, ramp: RampSpec,
                           table: HindsightTable | None = None) -> Trajectory:
    """Hindsight optimum of the suffix s[t_start:] starting from u_prev.

    The backward pass over a suffix equals the tail of the full pass, so a
    table computed on the whole series can be reused.
    """
    s = _values(series)
    if not 0 <= t_start < len(s):
        raise IndexError("t_start out of range")
    if table is None:
        table = hindsight_table(s[t_start:], ramp)
        return Trajectory(table.rollout(u_prev), float(u_prev))
    return Trajectory(table.rollout(u_prev, t_start), float(u_prev))


# --- independent oracle -------------------------------------------------------

MAX_DP_TRANSITIONS = 10 ** 8


def dp_oracle(series, u0: float | None, ramp: RampSpec, grid_step: float | None = None) -> Trajectory:
    """Exact DP over outputs quantized to a grid of spacing ``grid_step``.

    The grid is anchored at u0 (levels u0 + j*grid_step that are >= 0) so that
    the initial state is representable; with u0 a multiple of grid_step this is
    the plain grid of multiples. Default spacing is budget/8.
    """
    s = _values(series)
    u0 = float(s[0]) if u0 is None else float(u0)
    r = ramp.budget
    g = r / 8 if grid_step is None else float(grid_step)
    k = int(round(r / g))
    if k < 1 or abs(k * g - r) > 1e-9 * r:
        raise ValueError("grid_step must divide the ramp budget exactly")
    base = u0 - math.floor(u0 / g + 1e-9) * g
    top = max(float(s.max()), u0) + r
    levels = base + g * np.arange(int(math.ceil((top - base) / g)) + 1)
    T, J = len(s), len(levels)
    if T * J * (2 * k + 1) > MAX_DP_TRANSITIONS:
        raise MemoryError("dp_oracle grid too large")

    cost = np.where(np.abs(levels - u0) <= r + 1e-9, np.abs(levels - s[0]), np.inf)
    back = np.empty((T, J), dtype=np.int32)
    idx = np.arange(J)
    for t in range(1, T):
        padded = np.full(J + 2 * k, np.inf)
        padded[k:k + J] = cost
        best = np.full(J, np.inf)
        arg = idx.copy()
        for d in range(-k, k + 1):
            cand = padded[k + d:k + d + J]
            better = cand < best
            best = np.where(better, cand, best)
            arg = np.where(better, idx + d, arg)
        back[t] = arg
        cost = best + np.abs(levels - s[t])
    j = int(np.argmin(cost))
    path = np.empty(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        path[t] = j
        if t > 0:
            j = back[t, j]
    return Trajectory(levels[path], u0)


# --- action labels ------------------------------------------------------------

_LABEL_ORDER = (Action.TRACK, Action.DOWN, Action.UP)


def label_action(u_star: float, u_prev: float, s_t: float, ramp: RampSpec, tol: float = 1e-6) -> Action:
    lo, hi = reach_interval(u_prev, ramp)
    if u_star < lo - tol or u_star > hi + tol:
        raise ValueError(f"target output {u_star} is outside the reachable interval [{lo}, {hi}]")
    best, best_d = Action.TRACK, math.inf
    for a in _LABEL_ORDER:
        d = abs(apply_action(u_prev, s_t, a, ramp) - u_star)
        if d < best_d:
            best, best_d = a, d
    return best


def optimal_label(table: HindsightTable, t: int, u_prev: float) -> tuple[Action, float]:
    """Discretized hindsight-optimal action at state (t, u_prev), plus the continuous target."""
    u_star = table.optimal_output(t, u_prev)
    return label_action(u_star, u_prev, table.s[t], table.ramp), u_star


# --- persistence --------------------------------------------------------------

def save_trajectory_csv(traj: Trajectory, s, path):
    s = _values(s)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "s", "u", "action", "confidence"])
        for t in range(len(traj)):
            action = Action(int(traj.actions[t])).name if traj.actions is not None else ""
            conf = repr(float(traj.confidences[t])) if traj.confidences is not None else ""
            w.writerow([t, repr(float(s[t])), repr(float(traj.u[t])), action, conf])


def load_trajectory_csv(path) -> tuple[np.ndarray, Trajectory]:
    s, u, acts, confs = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            s.append(float(row["s"]))
            u.append(float(row["u"]))
            acts.append(Action[row["action"]] if row["action"] else None)
            confs.append(float(row["confidence"]) if row["confidence"] else None)
    actions = None if any(a is None for a in acts) else np.array([int(a) for a in acts])
    confidences = None if any(c is None for c in confs) else np.array(confs)
    # u0 is not stored; u[0] is used in its place
    return np.array(s), Trajectory(np.array(u), u[0] if u else 0.0, actions, confidences)
