import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ramplight.approximator import (
    Batch, ModelFormatError, Optimizer, PolicyNetwork, TrainConfig, aux_forward, forward,
    gate, gradient, load, loss, save, select_action, train_step,
)
from ramplight.control import Action
from ramplight.episodes import ExperimentMode, ObservationLayout
from ramplight.timeseries import NormalizationSpec

NORM = NormalizationSpec(0.0, 1000.0)
PAST = ObservationLayout(ExperimentMode.PAST_DATA, feature_dim=2)


def small_net(seed=0, hidden=(7, 5, 4), aux=False, layout=PAST):
    return PolicyNetwork.create(layout, NORM, hidden=hidden, seed=seed, aux_heads=aux)


def zero_net():
    net = small_net()
    for layer in net.trunk + [net.head]:
        for p in layer:
            p[...] = 0
    return net


def test_zero_net_is_uniform():
    p = forward(zero_net(), np.ones(PAST.dim))
    np.testing.assert_allclose(p, 1 / 3)


def test_bias_shift_invariance():
    net = small_net(seed=3)
    x = np.random.default_rng(0).normal(size=PAST.dim)
    p = forward(net, x)
    net.head[1][...] += 17.0
    np.testing.assert_allclose(forward(net, x), p, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_normalized(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed=seed)
    p = forward(net, rng.normal(scale=5, size=(8, PAST.dim)))
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)
    assert np.all(p > 0) and np.all(p < 1)
    assert np.all(p.max(axis=1) >= 1 / 3)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(small_net(), np.ones(PAST.dim + 1))


def test_loss_examples():
    net = zero_net()
    X = np.ones((4, PAST.dim))
    y = np.array([0, 1, 2, 0])
    assert loss(net, Batch(X, y)) == pytest.approx(np.log(3))
    net2 = small_net(seed=1)
    b = Batch(X, y)
    dup = Batch(np.vstack([X, X]), np.r_[y, y])
    assert loss(net2, dup, 0.01) == pytest.approx(loss(net2, b, 0.01), rel=1e-12)
    # saturated correct logits: only the penalty remains
    net3 = zero_net()
    net3.head[1][...] = [800.0, 0.0, 0.0]
    pen = sum(float((W ** 2).sum()) for W, _ in net3.trunk + [net3.head])
    assert loss(net3, Batch(X, np.zeros(4, int)), 0.5) == pytest.approx(0.5 * pen, abs=1e-12)
    with pytest.raises(ValueError):
        Batch(np.zeros((0, PAST.dim)), np.zeros(0))


def numeric_gradient(net, batch, l2, eps=1e-5):
    out = []
    for p in net.params(batch.task):
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            fp = loss(net, batch, l2)
            p[i] = old - eps
            fm = loss(net, batch, l2)
            p[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(a, b):
    num = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    den = max(float(np.max(np.abs(y))) for y in b)
    return num / max(den, 1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("task", ["policy", "aux"])
def test_gradient_matches_finite_differences(seed, task):
    rng = np.random.default_rng(seed)
    net = small_net(seed=seed, aux=True)
    # random biases keep pre-activations off the ReLU kink, where differences are meaningless
    for _, b in net.trunk + [net.head] + net.aux_heads:
        b[...] = rng.normal(scale=0.5, size=b.shape)
    X = rng.normal(size=(6, PAST.dim))
    y = rng.integers(0, 3, size=(6, 4) if task == "aux" else 6)
    batch = Batch(X, y, task)
    err = max_rel_error(gradient(net, batch, 1e-3), numeric_gradient(net, batch, 1e-3))
    assert err < 1e-4


def test_zero_input_zero_first_layer_gradient():
    net = small_net(seed=2)
    g = gradient(net, Batch(np.zeros((5, PAST.dim)), [0, 1, 2, 1, 0]))
    assert not g[0].any()


def test_gradient_mean_reduction():
    net = small_net(seed=4)
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(5, PAST.dim)), rng.integers(0, 3, 5)
    g1 = gradient(net, Batch(X, y), 1e-3)
    g2 = gradient(net, Batch(np.vstack([X, X]), np.r_[y, y]), 1e-3)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_train_step_zero_lr_and_descent():
    net = small_net(seed=5)
    before = [p.copy() for p in net.params()]
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(2, PAST.dim)), [1, 2])
    train_step(net, batch, TrainConfig(learning_rate=0.0, optimizer="sgd"))
    for a, b in zip(before, net.params()):
        assert np.array_equal(a, b)
    l0 = loss(net, batch)
    train_step(net, batch, TrainConfig(learning_rate=1e-2, optimizer="sgd", l2_penalty=0.0))
    assert loss(net, batch) < l0


def test_training_is_deterministic():
    rng = np.random.default_rng(9)
    X, y = rng.normal(size=(64, PAST.dim)), rng.integers(0, 3, 64)
    nets = []
    for _ in range(2):
        net = small_net(seed=8)
        cfg = TrainConfig(learning_rate=1e-2, seed=3)
        opt = Optimizer(cfg)
        for i in range(0, 64, 16):
            train_step(net, Batch(X[i:i + 16], y[i:i + 16]), cfg, opt)
        nets.append(net)
    for a, b in zip(nets[0].params(), nets[1].params()):
        assert np.array_equal(a, b)


def test_gate_examples():
    assert gate([0.5, 0.3, 0.2], 0.7) == (Action.TRACK, 0.5, False)
    assert gate([0.2, 0.75, 0.05], 0.7) == (Action.UP, 0.75, True)
    assert gate([0.05, 0.15, 0.8], 0.8)[0] == Action.TRACK  # strict inequality
    assert gate([0.4, 0.4, 0.2], 0.0)[0] == Action.TRACK  # tie goes to Track
    net = small_net(seed=6)
    for x in np.random.default_rng(2).normal(scale=20, size=(50, PAST.dim)):
        a, c, dev = select_action(net, x, 1.01)
        assert a == Action.TRACK and not dev and 1 / 3 <= c <= 1


def test_save_load_round_trip(tmp_path):
    net = small_net(seed=7, hidden=(128, 64, 16))
    p = tmp_path / "m.txt"
    save(net, p)
    back = load(p, mode="PastData")
    X = np.random.default_rng(0).normal(size=(20, PAST.dim))
    assert np.array_equal(forward(back, X), forward(net, X))
    for a, b in zip(net.params(), back.params()):
        assert np.array_equal(a, b)
    assert back.normalization == NORM and back.layout == PAST
    save(back, tmp_path / "m2.txt")
    assert (tmp_path / "m2.txt").read_bytes() == p.read_bytes()


def test_load_errors(tmp_path):
    net = small_net(seed=1)
    p = tmp_path / "m.txt"
    save(net, p)
    text = p.read_text()
    with pytest.raises(ModelFormatError, match="trained for PastData"):
        load(p, mode=ExperimentMode.FUTURE_IRRADIANCE)
    (tmp_path / "t.txt").write_text("\n".join(text.splitlines()[:12]))
    with pytest.raises(ModelFormatError, match="truncated"):
        load(tmp_path / "t.txt")
    (tmp_path / "v.txt").write_text(text.replace("ramplight-policy 1", "ramplight-policy 9"))
    with pytest.raises(ModelFormatError, match="version"):
        load(tmp_path / "v.txt")
    lines = text.splitlines()
    lines[8] = " ".join(lines[8].split()[:-1])
    (tmp_path / "s.txt").write_text("\n".join(lines))
    with pytest.raises(ModelFormatError):
        load(tmp_path / "s.txt")


def test_aux_heads_not_serialized(tmp_path):
    net = small_net(seed=2, aux=True)
    assert aux_forward(net, np.zeros(PAST.dim)).shape == (1, 4, 3)
    save(net, tmp_path / "m.txt")
    assert load(tmp_path / "m.txt").aux_heads == []
