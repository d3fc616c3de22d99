"""Fully connected softmax policy over {Track, Up, Down}, written on numpy.

Hidden layers use ReLU (derivative 0 at the kink); the policy head is a linear
layer followed by softmax. Optional auxiliary heads (4 x 3 classes) hang off the
last hidden layer for the ramp-containment pretraining task.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import Action
from .episodes import ExperimentMode, ObservationLayout
from .timeseries import NormalizationSpec

FORMAT_MAGIC = "ramplight-policy"
FORMAT_VERSION = 1
N_ACTIONS = 3
N_AUX_HEADS = 4


class ModelFormatError(ValueError):
    pass


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class PolicyNetwork:
    layout: ObservationLayout
    normalization: NormalizationSpec
    trunk: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray]
    aux_heads: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def create(cls, layout: ObservationLayout, normalization: NormalizationSpec,
               hidden=(128, 64, 16), seed: int = 0, aux_heads: bool = False) -> "PolicyNetwork":
        rng = np.random.default_rng(seed)
        dims = [layout.dim, *hidden]
        trunk = [(glorot(rng, a, b), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
        head = (glorot(rng, dims[-1], N_ACTIONS), np.zeros(N_ACTIONS))
        net = cls(layout, normalization, trunk, head)
        if aux_heads:
            net.add_aux_heads(seed + 1)
        return net

    def add_aux_heads(self, seed: int):
        rng = np.random.default_rng(seed)
        width = self.head[0].shape[0]
        self.aux_heads = [(glorot(rng, width, N_ACTIONS), np.zeros(N_ACTIONS)) for _ in range(N_AUX_HEADS)]

    def drop_aux_heads(self):
        self.aux_heads = []

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(W.shape[1] for W, _ in self.trunk)

    def params(self, task: str = "policy") -> list[np.ndarray]:
        """Trainable arrays for a task, in a fixed order (W, b per layer)."""
        out = [p for layer in self.trunk for p in layer]
        heads = [self.head] if task == "policy" else self.aux_heads
        if task == "aux" and not heads:
            raise ValueError("network has no auxiliary heads")
        return out + [p for layer in heads for p in layer]

    def copy(self) -> "PolicyNetwork":
        cp = lambda layers: [(W.copy(), b.copy()) for W, b in layers]
        return PolicyNetwork(self.layout, self.normalization, cp(self.trunk),
                             (self.head[0].copy(), self.head[1].copy()), cp(self.aux_heads))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _trunk_forward(net: PolicyNetwork, X):
    acts = [X]
    pre = []
    h = X
    for W, b in net.trunk:
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def _check_input(net: PolicyNetwork, X):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != net.layout.dim:
        raise ValueError(f"observation has dimension {X.shape[-1]}, network expects {net.layout.dim}")
    return X


def forward(net: PolicyNetwork, obs) -> np.ndarray:
    """Action probabilities (Track, Up, Down) for one observation or a batch."""
    X = _check_input(net, obs)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    acts, _ = _trunk_forward(net, X)
    probs = softmax(acts[-1] @ net.head[0] + net.head[1])
    return probs[0] if single else probs


def aux_forward(net: PolicyNetwork, obs) -> np.ndarray:
    """(N, 4, 3) probabilities of the auxiliary heads."""
    X = np.atleast_2d(_check_input(net, obs))
    acts, _ = _trunk_forward(net, X)
    return np.stack([softmax(acts[-1] @ W + b) for W, b in net.aux_heads], axis=1)


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray  # (N,) action labels, or (N, 4) auxiliary labels
    task: str = "policy"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) == 0:
            raise ValueError("empty batch")
        if len(self.y) != len(self.X):
            raise ValueError("labels and observations differ in length")
        if self.task == "aux" and (self.y.ndim != 2 or self.y.shape[1] != N_AUX_HEADS):
            raise ValueError("auxiliary batches need (N, 4) labels")

    def __len__(self):
        return len(self.X)


def _weights(net, task):
    return [p for p in net.params(task) if p.ndim == 2]


def loss(net: PolicyNetwork, batch: Batch, l2_penalty: float = 0.0) -> float:
    """Mean cross-entropy (averaged over heads for the auxiliary task) plus L2 on weights."""
    X = _check_input(net, batch.X)
    acts, _ = _trunk_forward(net, X)
    h = acts[-1]
    n = len(X)
    if batch.task == "policy":
        lp = log_softmax(h @ net.head[0] + net.head[1])
        data = -lp[np.arange(n), batch.y].mean()
    else:
        data = 0.0
        for k, (W, b) in enumerate(net.aux_heads):
            lp = log_softmax(h @ W + b)
            data += -lp[np.arange(n), batch.y[:, k]].mean()
        data /= len(net.aux_heads)
    penalty = sum(float(np.sum(W * W)) for W in _weights(net, batch.task))
    return float(data + l2_penalty * penalty)


def gradient(net: PolicyNetwork, batch: Batch, l2_penalty: float = 0.0) -> list[np.ndarray]:
    """Exact gradient of `loss`, aligned with net.params(batch.task)."""
    X = _check_input(net, batch.X)
    acts, pre = _trunk_forward(net, X)
    h = acts[-1]
    n = len(X)
    head_grads = []
    dh = np.zeros_like(h)
    if batch.task == "policy":
        heads, labels, weight = [net.head], [batch.y], 1.0 / n
    else:
        heads = net.aux_heads
        labels = [batch.y[:, k] for k in range(len(heads))]
        weight = 1.0 / (n * len(heads))
    for (W, b), y in zip(heads, labels):
        d = softmax(h @ W + b)
        d[np.arange(n), y] -= 1.0
        d *= weight
        head_grads += [h.T @ d + 2 * l2_penalty * W, d.sum(axis=0)]
        dh += d @ W.T
    trunk_grads = []
    delta = dh
    for i in range(len(net.trunk) - 1, -1, -1):
        W, _ = net.trunk[i]
        dz = delta * (pre[i] > 0)
        trunk_grads = [acts[i].T @ dz + 2 * l2_penalty * W, dz.sum(axis=0)] + trunk_grads
        delta = dz @ W.T
    return trunk_grads + head_grads


# --- optimization ------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    optimizer: str = "adam"  # or "sgd"
    seed: int = 0
    l2_penalty: float = 1e-6

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate >= 0, batch_size > 0 and epochs >= 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """Plain gradient descent or Adam over a fixed list of parameter arrays."""

    def __init__(self, config: TrainConfig, beta1=0.9, beta2=0.999, eps=1e-8):
        self.config = config
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        lr = self.config.learning_rate
        if self.config.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        if self.m is None or len(self.m) != len(params):
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
            self.t = 0
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(net: PolicyNetwork, batch: Batch, config: TrainConfig,
               optimizer: Optimizer | None = None) -> PolicyNetwork:
    """One optimizer update on `batch`; parameters are modified in place."""
    optimizer = optimizer or Optimizer(config)
    optimizer.step(net.params(batch.task), gradient(net, batch, config.l2_penalty))
    return net


def fit(net: PolicyNetwork, X, y, config: TrainConfig, epochs: int, task: str = "policy",
        rng: np.random.Generator | None = None, optimizer: Optimizer | None = None) -> list[float]:
    """Mini-batch training for `epochs` passes; returns the mean loss of each pass."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    optimizer = optimizer or Optimizer(config)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch(X[idx], y[idx], task)
            total += loss(net, batch, config.l2_penalty) * len(idx)
            train_step(net, batch, config, optimizer)
        history.append(total / max(len(X), 1))
    return history


# --- acting ------------------------------------------------------------------------------

def select_action(net: PolicyNetwork, obs, threshold: float) -> tuple[Action, float, bool]:
    """Confidence-gated action: the argmax only if its probability exceeds threshold."""
    probs = forward(net, obs)
    return gate(probs, threshold)


def gate(probs, threshold: float) -> tuple[Action, float, bool]:
    probs = np.asarray(probs)
    conf = float(probs.max())
    action = Action(int(np.argmax(probs))) if conf > threshold else Action.TRACK
    return action, conf, action != Action.TRACK


def gate_batch(probs: np.ndarray, thresholds) -> tuple[np.ndarray, np.ndarray]:
    conf = probs.max(axis=1)
    actions = np.where(conf > thresholds, probs.argmax(axis=1), int(Action.TRACK))
    return actions, conf


# --- persistence ------------------------------------------------------------------------
#
# Plain text, one record per line:
#   ramplight-policy <version>
#   mode <mode name>
#   feature_dim <F>
#   feature_offsets <o_1> ... <o_k>          (may be empty)
#   slots <name>:<dim> ...
#   normalization <min> <max>
#   layers <n>
#   then per layer: "layer <i> <fan_in> <fan_out>", fan_in lines of fan_out
#   weights, one line of fan_out biases
#   end
# Floats are written with 17 significant digits so parsing restores them exactly.

def _num(x: float) -> str:
    return "%.17g" % x


def save(net: PolicyNetwork, path):
    layers = net.trunk + [net.head]
    lines = [
        f"{FORMAT_MAGIC} {FORMAT_VERSION}",
        f"mode {net.layout.mode.value}",
        f"feature_dim {net.layout.feature_dim}",
        "feature_offsets " + " ".join(_num(o) for o in net.layout.feature_offsets),
        "slots " + " ".join(f"{n}:{d}" for n, d in net.layout.slots),
        f"normalization {_num(net.normalization.min)} {_num(net.normalization.max)}",
        f"layers {len(layers)}",
    ]
    for i, (W, b) in enumerate(layers):
        lines.append(f"layer {i} {W.shape[0]} {W.shape[1]}")
        lines.extend(" ".join(_num(x) for x in row) for row in W)
        lines.append(" ".join(_num(x) for x in b))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def _expect(lines, i, key):
    if i >= len(lines):
        raise ModelFormatError(f"truncated model file: expected '{key}' at line {i + 1}")
    parts = lines[i].split(" ")
    if parts[0] != key:
        raise ModelFormatError(f"line {i + 1}: expected '{key}', found {parts[0]!r}")
    return parts[1:]


def _floats(text, lineno, n):
    try:
        vals = [float(x) for x in text.split()]
    except ValueError:
        raise ModelFormatError(f"line {lineno}: unparsable number") from None
    if len(vals) != n:
        raise ModelFormatError(f"line {lineno}: expected {n} values, found {len(vals)}")
    return vals


def load(path, mode: ExperimentMode | str | None = None) -> PolicyNetwork:
    lines = Path(path).read_text().splitlines()
    head = _expect(lines, 0, FORMAT_MAGIC)
    if head != [str(FORMAT_VERSION)]:
        raise ModelFormatError(f"unsupported model format version {' '.join(head)}")
    try:
        file_mode = ExperimentMode(_expect(lines, 1, "mode")[0])
        feature_dim = int(_expect(lines, 2, "feature_dim")[0])
        offsets = tuple(float(x) for x in _expect(lines, 3, "feature_offsets") if x)
        slots = tuple(_expect(lines, 4, "slots"))
        lo, hi = (float(x) for x in _expect(lines, 5, "normalization"))
        n_layers = int(_expect(lines, 6, "layers")[0])
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model header: {exc}") from None
    layout = ObservationLayout(file_mode, feature_dim, offsets)
    if slots != tuple(f"{n}:{d}" for n, d in layout.slots):
        raise ModelFormatError("slot list does not match the recorded mode and feature layout")
    if mode is not None and ExperimentMode(mode) != file_mode:
        raise ModelFormatError(f"model was trained for {file_mode.value}, not {ExperimentMode(mode).value}")
    i = 7
    layers = []
    fan_prev = layout.dim
    for k in range(n_layers):
        spec = _expect(lines, i, "layer")
        try:
            idx, fan_in, fan_out = (int(x) for x in spec)
        except ValueError:
            raise ModelFormatError(f"line {i + 1}: bad layer header") from None
        if idx != k or fan_in != fan_prev:
            raise ModelFormatError(f"line {i + 1}: layer shapes do not compose")
        if i + fan_in + 1 >= len(lines):
            raise ModelFormatError("truncated model file inside layer data")
        W = np.array([_floats(lines[i + 1 + r], i + 2 + r, fan_out) for r in range(fan_in)])
        b = np.array(_floats(lines[i + 1 + fan_in], i + 2 + fan_in, fan_out))
        layers.append((W.reshape(fan_in, fan_out), b))
        fan_prev = fan_out
        i += fan_in + 2
    _expect(lines, i, "end")
    if not layers or layers[-1][0].shape[1] != N_ACTIONS:
        raise ModelFormatError("final layer must have 3 outputs")
    return PolicyNetwork(layout, NormalizationSpec(lo, hi), layers[:-1], layers[-1])
