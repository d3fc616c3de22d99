"""Pretraining on ramp containment, DAgger with beta-mixed rollouts, behavior cloning."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .approximator import Optimizer, PolicyNetwork, TrainConfig, fit, forward
from .control import Action, RampSpec, baseline_rollout, optimal_label
from .episodes import Episode, lockstep_rollout, observation_matrix
from .timeseries import IrradianceSeries

log = logging.getLogger(__name__)

CONTAINED, HIGHER, LOWER = 0, 1, 2
PRETRAIN_HORIZONS = (10.0, 30.0, 60.0, 120.0)


def make_pretrain_labels(series, ramp: RampSpec, horizons=PRETRAIN_HORIZONS) -> np.ndarray:
    """(T, len(horizons)) labels: is s(t+h) within rate*h of s(t), above, or below?

    Horizons are rounded to whole samples; lookups past the end use the last sample.
    """
    s = series.values if isinstance(series, IrradianceSeries) else np.asarray(series, dtype=float)
    T = len(s)
    idx = np.arange(T)
    out = np.empty((T, len(horizons)), dtype=np.int64)
    for k, h in enumerate(horizons):
        steps = int(round(h / ramp.dt))
        diff = s[np.minimum(idx + steps, T - 1)] - s
        limit = ramp.rate_limit * h
        out[:, k] = np.where(np.abs(diff) <= limit, CONTAINED, np.where(diff > limit, HIGHER, LOWER))
    return out


def _statics(net: PolicyNetwork, episodes: Sequence[Episode]):
    return [observation_matrix(net.layout, ep, net.normalization) for ep in episodes]


def pretrain_data(net: PolicyNetwork, episodes: Sequence[Episode], ramp: RampSpec, horizons=PRETRAIN_HORIZONS):
    """Observations along the baseline trajectory with their containment labels."""
    Xs, ys = [], []
    for ep, X in zip(episodes, _statics(net, episodes)):
        u = baseline_rollout(ep.series, ep.u0, ramp).u
        X = X.copy()
        X[:, net.layout.prev_index] = (np.r_[ep.u0, u[:-1]] - net.normalization.min) / (
            net.normalization.max - net.normalization.min)
        Xs.append(X)
        ys.append(make_pretrain_labels(ep.series, ramp, horizons))
    return np.concatenate(Xs), np.concatenate(ys)


def pretrain(net: PolicyNetwork, episodes: Sequence[Episode], config: TrainConfig, ramp: RampSpec,
             horizons=PRETRAIN_HORIZONS) -> PolicyNetwork:
    """Train trunk and auxiliary heads for config.epochs; the policy head is not touched."""
    if not net.aux_heads:
        raise ValueError("pretraining needs a network with auxiliary heads")
    if config.epochs == 0:
        return net
    X, y = pretrain_data(net, episodes, ramp, horizons)
    hist = fit(net, X, y, config, config.epochs, task="aux")
    log.info("pretraining done: %d samples, final loss %.4f", len(X), hist[-1])
    return net


# --- aggregated dataset -------------------------------------------------------------

@dataclass
class AggregatedDataset:
    """Append-only (observation, label) store with per-example provenance."""

    dim: int
    _X: list = field(default_factory=list)
    _y: list = field(default_factory=list)
    _prov: list = field(default_factory=list)  # (episode, t, epoch, u_prev)

    def __len__(self):
        return sum(len(y) for y in self._y)

    def append(self, X, labels, episode_ids, times, epoch: int, u_prev):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError("observation width does not match the dataset")
        if self._prov and epoch < self._prov[-1][0, 2]:
            raise ValueError("provenance epochs must be nondecreasing")
        labels = np.asarray(labels, dtype=np.int64)
        if np.any((labels < 0) | (labels > 2)):
            raise ValueError("labels must be Track, Up or Down")
        n = len(labels)
        prov = np.column_stack([np.asarray(episode_ids, float), np.asarray(times, float),
                                np.full(n, float(epoch)), np.asarray(u_prev, float)])
        self._X.append(X)
        self._y.append(labels)
        self._prov.append(prov)

    @property
    def X(self) -> np.ndarray:
        return np.concatenate(self._X) if self._X else np.zeros((0, self.dim))

    @property
    def y(self) -> np.ndarray:
        return np.concatenate(self._y) if self._y else np.zeros(0, dtype=np.int64)

    @property
    def provenance(self) -> np.ndarray:
        return np.concatenate(self._prov) if self._prov else np.zeros((0, 4))

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"obs_{i}" for i in range(self.dim)] + ["label", "episode", "t", "epoch", "u_prev"])
            for x, y, p in zip(self.X, self.y, self.provenance):
                w.writerow([repr(float(v)) for v in x] + [Action(int(y)).name, int(p[0]), int(p[1]),
                                                          int(p[2]), repr(float(p[3]))])


# --- rollouts and labels -------------------------------------------------------------

@dataclass
class VisitedStates:
    X: np.ndarray
    episode: np.ndarray  # index into the episode list
    t: np.ndarray
    u_prev: np.ndarray
    expert: np.ndarray  # whether the reference policy acted at this state
    u: list[np.ndarray]  # realized output per episode


def mixed_rollout(net: PolicyNetwork, episodes: Sequence[Episode], beta: float, ramp: RampSpec,
                  rng: np.random.Generator | None = None) -> VisitedStates:
    """Roll out beta * reference + (1 - beta) * learner, mixing per step.

    The reference executes the discretized hindsight-optimal label at the
    current state; the learner acts ungated (its argmax).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if rng is None and 0.0 < beta < 1.0:
        raise ValueError("mixing needs a random generator")
    statics = _statics(net, episodes)
    rec_X, rec_ep, rec_t, rec_u, rec_exp = [], [], [], [], []

    def chooser(t, Xt, u_prev, rows):
        n = len(rows)
        if beta >= 1.0:
            expert = np.ones(n, dtype=bool)
        elif beta <= 0.0:
            expert = np.zeros(n, dtype=bool)
        else:
            expert = rng.random(n) < beta
        acts = np.empty(n, dtype=np.int64)
        if not expert.all():
            acts[:] = forward(net, Xt).argmax(axis=1)
        for k in np.flatnonzero(expert):
            table = episodes[rows[k]].table(ramp)
            acts[k] = optimal_label(table, t, float(u_prev[k]))[0]
        rec_X.append(Xt)
        rec_ep.append(rows)
        rec_t.append(np.full(n, t))
        rec_u.append(u_prev.copy())
        rec_exp.append(expert)
        return acts, None

    results = lockstep_rollout(episodes, statics, net.layout.prev_index, net.normalization, ramp, chooser)
    return VisitedStates(np.concatenate(rec_X), np.concatenate(rec_ep), np.concatenate(rec_t),
                         np.concatenate(rec_u), np.concatenate(rec_exp), [r.u for r in results])


def label_states(states: VisitedStates, episodes: Sequence[Episode], ramp: RampSpec) -> np.ndarray:
    """Discretized hindsight-optimal action for every visited (t, u_prev)."""
    labels = np.empty(len(states.t), dtype=np.int64)
    for i, (e, t, u) in enumerate(zip(states.episode, states.t, states.u_prev)):
        labels[i] = optimal_label(episodes[int(e)].table(ramp), int(t), float(u))[0]
    return labels


def _append_states(data: AggregatedDataset, states: VisitedStates, labels, episode_ids, epoch):
    data.append(states.X, labels, np.asarray(episode_ids)[states.episode], states.t, epoch, states.u_prev)


def bootstrap_dataset(net: PolicyNetwork, episodes: Sequence[Episode], ramp: RampSpec) -> AggregatedDataset:
    """States visited by the (discretized) reference policy, labeled; provenance epoch 0."""
    data = AggregatedDataset(net.layout.dim)
    states = mixed_rollout(net, episodes, 1.0, ramp)
    _append_states(data, states, label_states(states, episodes, ramp), range(len(episodes)), 0)
    return data


# --- DAgger -----------------------------------------------------------------------------

@dataclass
class DaggerSchedule:
    p: float = 0.9
    epochs: int = 50
    collect_every: int = 2
    first_collect_after_epoch: int = 5
    rollout_episodes_per_collection: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError("decay base p must lie in [0, 1)")
        if self.collect_every < 1 or self.rollout_episodes_per_collection < 1:
            raise ValueError("collect_every and rollout_episodes_per_collection must be positive")
        if self.epochs < 0 or self.first_collect_after_epoch < 0:
            raise ValueError("epoch counts must be non-negative")

    def beta(self, n: int) -> float:
        return self.p ** n

    def collects_at(self, n: int) -> bool:
        k = n - self.first_collect_after_epoch
        return k >= 1 and (k - 1) % self.collect_every == 0


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    collected: bool
    added: int
    dataset_size: int
    loss: float


def dagger_train(net: PolicyNetwork, episodes: Sequence[Episode], schedule: DaggerSchedule,
                 config: TrainConfig, ramp: RampSpec, dataset: AggregatedDataset | None = None):
    """Train with dataset aggregation; returns (net, history, dataset).

    The aggregated set starts from reference-policy states. At collection epochs
    the mixed policy with beta_n = p**n is rolled out on a random subset of the
    training episodes and its states are labeled and appended. Every epoch makes
    one pass over the whole set.
    """
    data = dataset if dataset is not None else bootstrap_dataset(net, episodes, ramp)
    collect_rng = np.random.default_rng(schedule.seed)
    train_rng = np.random.default_rng(config.seed)
    optimizer = Optimizer(config)
    history: list[EpochRecord] = []
    for n in range(1, schedule.epochs + 1):
        beta = schedule.beta(n)
        added = 0
        collected = schedule.collects_at(n)
        if collected:
            k = min(schedule.rollout_episodes_per_collection, len(episodes))
            pick = np.sort(collect_rng.choice(len(episodes), size=k, replace=False))
            subset = [episodes[i] for i in pick]
            states = mixed_rollout(net, subset, beta, ramp, collect_rng)
            labels = label_states(states, subset, ramp)
            _append_states(data, states, labels, pick, n)
            added = len(labels)
        epoch_loss = fit(net, data.X, data.y, config, 1, rng=train_rng, optimizer=optimizer)[0]
        history.append(EpochRecord(n, beta, collected, added, len(data), epoch_loss))
        log.info("epoch %d beta=%.4f |D|=%d loss=%.4f", n, beta, len(data), epoch_loss)
    return net, history, data


def behavior_clone(net: PolicyNetwork, episodes: Sequence[Episode], config: TrainConfig, ramp: RampSpec,
                   epochs: int | None = None, dataset: AggregatedDataset | None = None):
    """Supervised training on reference-policy states only (the DAgger ablation)."""
    epochs = config.epochs if epochs is None else epochs
    data = dataset if dataset is not None else bootstrap_dataset(net, episodes, ramp)
    train_rng = np.random.default_rng(config.seed)
    optimizer = Optimizer(config)
    for _ in range(epochs):
        fit(net, data.X, data.y, config, 1, rng=train_rng, optimizer=optimizer)
    return net


def save_history_csv(history: Sequence[EpochRecord], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "beta", "collected", "added", "dataset_size", "loss"])
        for h in history:
            w.writerow([h.epoch, repr(h.beta), int(h.collected), h.added, h.dataset_size, repr(h.loss)])
