import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from dmlhedge import twin_net as tn
from dmlhedge.errors import DomainError, NumericError, StateError, TrainingError
from dmlhedge.instruments import Instrument, build_training_set
from dmlhedge.market_sim import MarketConfig, simulate


class Rows:
    def __init__(self, z, tau, x, q):
        self.z, self.tau, self.x, self.q = (np.asarray(v, dtype=float) for v in (z, tau, x, q))


def random_net(rng, sizes, norm=None):
    params = tn.init_params(sizes, int(rng.integers(2**31)), norm)
    for b in params.biases:
        b[:] = rng.normal(0, 0.5, b.shape)
    return params


def random_norm(rng):
    return tn.Normalization(mean_z=100.0, std_z=rng.uniform(5, 30), mean_tau=0.5, std_tau=0.3,
                            mean_x=rng.uniform(0, 10), std_x=rng.uniform(1, 20), std_q=rng.uniform(0.2, 1.0))


def fd_delta(params, z, tau, h, act=tn.SOFTPLUS):
    f = lambda zz: tn.forward(params, zz, tau, act)[0].y
    # fourth-order central stencil
    return (-f(z + 2 * h) + 8 * f(z + h) - 8 * f(z - h) + f(z - 2 * h)) / (12 * h)


# ---------------------------------------------------------------- activation

def test_softplus_identities():
    u = np.concatenate([np.linspace(-50, 50, 2001), [-800.0, -40.0, 40.0, 800.0]])
    g = tn.softplus(u)
    assert np.all(np.isfinite(g))
    assert np.max(np.abs(g - tn.softplus(-u) - u) / np.maximum(1.0, np.abs(u))) < 1e-12
    mid = u[np.abs(u) <= 50]
    assert np.allclose(tn.SOFTPLUS.df(mid), 1.0 / (1.0 + np.exp(-mid)), rtol=1e-13, atol=0)
    assert tn.softplus(0.0) == pytest.approx(np.log(2.0), abs=1e-16)
    s = expit(u)
    assert np.allclose(tn.SOFTPLUS.d2f(u, s), s * (1 - s))


# ---------------------------------------------------------------- init / forward

def test_init_deterministic_and_shapes():
    a, b = tn.init_params((2, 20, 20, 20, 20, 1), seed=5), tn.init_params((2, 20, 20, 20, 20, 1), seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert a.layer_sizes == (2, 20, 20, 20, 20, 1)
    assert all(np.all(bias == 0) for bias in a.biases)
    c = tn.init_params((2, 20, 20, 20, 20, 1), seed=6)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_variance():
    w = np.concatenate([tn.init_params((2, 20, 1), seed=s).weights[0].ravel() for s in range(20)])
    target = 2.0 / 22
    assert abs(w.var() / target - 1) < 0.2
    assert abs(w.mean()) < 3 * np.sqrt(target / w.size)


def test_zero_weights_give_mean_and_flat_delta():
    p = tn.init_params((2, 5, 5, 1), seed=1, norm=tn.Normalization(mean_x=3.5, std_x=2.0, std_z=10, mean_z=100))
    for W in p.weights:
        W[:] = 0
    out = tn.predict(p, np.array([80.0, 100.0, 130.0]), 0.5)
    assert np.all(out.y_norm == 0) and np.all(out.y == 3.5)
    assert np.all(out.dy_dz == 0)


def test_zero_weights_propagate_bias_path():
    p = tn.init_params((2, 3, 3, 1), seed=1)
    for W in p.weights:
        W[:] = 0
    p.biases[0][:] = [0.1, 0.2, 0.3]
    p.biases[1][:] = [1.0, -1.0, 2.0]
    p.biases[2][:] = [0.7]
    # with zero weights only the last bias reaches the output
    assert tn.forward(p, 100.0, 0.5)[0].y_norm[0] == pytest.approx(0.7)


def test_hand_set_unit_weights():
    one = tn.NetParams([np.ones((2, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    assert tn.forward(one, 0.0, 0.0)[0].y_norm[0] == pytest.approx(np.log(2.0), abs=1e-15)
    two = tn.NetParams([np.ones((2, 1)), np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1)] * 3)
    assert tn.forward(two, 0.0, 0.0)[0].y_norm[0] == pytest.approx(np.log(3.0), abs=1e-15)


def test_batch_equals_rowwise():
    rng = np.random.default_rng(0)
    p = random_net(rng, (2, 8, 8, 1), random_norm(rng))
    z, tau = rng.uniform(60, 160, 25), rng.uniform(0.01, 1, 25)
    batch = tn.predict(p, z, tau)
    for i in range(25):
        one = tn.predict(p, z[i:i + 1], tau[i:i + 1])
        assert one.y[0] == pytest.approx(batch.y[i], rel=1e-13, abs=1e-13)
        assert one.dy_dz[0] == pytest.approx(batch.dy_dz[i], rel=1e-12, abs=1e-13)


def test_nonfinite_forward_names_layer():
    p = tn.init_params((2, 4, 4, 1), seed=1)
    p.weights[1][0, 0] = np.inf
    with pytest.raises(NumericError) as exc:
        tn.forward(p, 100.0, 0.5)
    assert exc.value.layer == 2


def test_twin_needs_cache():
    with pytest.raises(StateError):
        tn.twin_backward(tn.init_params((2, 3, 1), seed=0), None)


# ---------------------------------------------------------------- twin pass

def test_linear_net_delta_is_weight_product():
    rng = np.random.default_rng(3)
    norm = random_norm(rng)
    p = random_net(rng, (2, 4, 3, 1), norm)
    P = p.weights[0] @ p.weights[1] @ p.weights[2]
    out = tn.predict(p, rng.uniform(80, 120, 6), 0.3, act=tn.IDENTITY)
    assert np.allclose(out.dy_dz, P[0, 0] * norm.std_x / norm.std_z, rtol=1e-13)


def test_twin_matches_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        norm = random_norm(rng)
        sizes = (2,) + tuple(rng.integers(2, 12, size=rng.integers(1, 5))) + (1,)
        p = random_net(rng, sizes, norm)
        z, tau = rng.uniform(60, 160, 4), rng.uniform(0.01, 1.0, 4)
        d = tn.predict(p, z, tau).dy_dz
        fd = fd_delta(p, z, tau, 1e-4 * norm.std_z)
        worst = max(worst, np.max(np.abs(d - fd) / np.maximum(np.abs(fd), 1e-6)))
    assert worst < 1e-6


def test_twin_denormalization():
    rng = np.random.default_rng(4)
    p = random_net(rng, (2, 6, 6, 1), random_norm(rng))
    out = tn.predict(p, rng.uniform(80, 120, 5), 0.4)
    n = p.norm
    assert np.allclose(out.y, out.y_norm * n.std_x + n.mean_x, rtol=1e-15)
    assert np.allclose(out.dy_dz, out.dy_dz_norm * n.std_x / n.std_z, rtol=1e-15)


# ---------------------------------------------------------------- loss

def _exact_rows(params, z, tau):
    out = tn.predict(params, z, tau)
    return Rows(z, tau, out.y, out.dy_dz)


def test_loss_zero_when_labels_are_predictions():
    rng = np.random.default_rng(5)
    p = random_net(rng, (2, 5, 5, 1), random_norm(rng))
    rows = _exact_rows(p, rng.uniform(80, 120, 16), rng.uniform(0.1, 1, 16))
    assert tn.loss(p, rows, lam=1.0) < 1e-28


def test_loss_unit_derivative_residual():
    rng = np.random.default_rng(6)
    p = random_net(rng, (2, 5, 5, 1), random_norm(rng))
    z, tau = rng.uniform(80, 120, 16), rng.uniform(0.1, 1, 16)
    out = tn.predict(p, z, tau)
    rows = Rows(z, tau, out.y, out.dy_dz - p.norm.std_q)
    assert tn.loss(p, rows, lam=1.0) == pytest.approx(1.0, abs=1e-12)
    assert tn.loss(p, rows, lam=0.0) < 1e-28


def test_lam_zero_loss_is_value_mse():
    rng = np.random.default_rng(7)
    p = random_net(rng, (2, 5, 5, 1), random_norm(rng))
    rows = Rows(rng.uniform(80, 120, 30), rng.uniform(0.1, 1, 30), rng.normal(5, 3, 30), rng.uniform(0, 1, 30))
    assert tn.loss(p, rows, lam=0.0) == tn.mse_loss(p, rows)


def test_empty_batch():
    p = tn.init_params((2, 3, 1), seed=0)
    with pytest.raises(DomainError):
        tn.loss(p, Rows([], [], [], []), lam=1.0)


# ---------------------------------------------------------------- gradients

def _set_flat(params, flat):
    out = params.copy()
    i = 0
    for W, b in zip(out.weights, out.biases):
        W.ravel()[:] = flat[i:i + W.size]
        i += W.size
        b[:] = flat[i:i + b.size]
        i += b.size
    return out


def _flat(params):
    return np.concatenate([a.ravel() for pair in zip(params.weights, params.biases) for a in pair])


def fd_gradient(params, rows, lam, h=1e-5):
    theta = _flat(params)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        f = lambda t: tn.loss(_set_flat(params, t), rows, lam)
        g[i] = (-f(theta + 2 * e) + 8 * f(theta + e) - 8 * f(theta - e) + f(theta - 2 * e)) / (12 * h)
    return g


def max_rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


@pytest.mark.parametrize("lam", [0.0, 1.0, 3.0])
def test_param_gradients_match_finite_differences(lam):
    rng = np.random.default_rng(12 + int(lam))
    p = random_net(rng, (2, 4, 4, 1), random_norm(rng))
    rows = Rows(rng.uniform(80, 120, 8), rng.uniform(0.1, 1, 8), rng.normal(5, 4, 8), rng.uniform(0, 1, 8))
    g = tn.param_gradients(p, rows, lam).flat()
    assert max_rel_err(g, fd_gradient(p, rows, lam)) < 1e-5


def test_lam_zero_gradients_equal_plain_backprop():
    rng = np.random.default_rng(13)
    p = random_net(rng, (2, 6, 6, 6, 1), random_norm(rng))
    rows = Rows(rng.uniform(80, 120, 32), rng.uniform(0.1, 1, 32), rng.normal(5, 4, 32), rng.uniform(0, 1, 32))
    a = tn.param_gradients(p, rows, 0.0).flat()
    b = tn.mse_gradients(p, rows).flat()
    assert np.array_equal(a, b)


def test_zero_residual_gives_zero_gradient():
    rng = np.random.default_rng(14)
    p = random_net(rng, (2, 5, 5, 1), random_norm(rng))
    rows = _exact_rows(p, rng.uniform(80, 120, 16), rng.uniform(0.1, 1, 16))
    assert np.max(np.abs(tn.param_gradients(p, rows, 1.0).flat())) < 1e-12


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.0, 5.0))
def test_gradient_exactness_property(seed, lam):
    rng = np.random.default_rng(seed)
    p = random_net(rng, (2, 3, 3, 1), random_norm(rng))
    rows = Rows(rng.uniform(80, 120, 5), rng.uniform(0.1, 1, 5), rng.normal(5, 4, 5), rng.uniform(0, 1, 5))
    assert max_rel_err(tn.param_gradients(p, rows, lam).flat(), fd_gradient(p, rows, lam)) < 1e-5


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def call_rows():
    b = simulate(MarketConfig(), 1024, seed=21)
    return build_training_set(b, Instrument(), seed=21)


def test_constant_target_is_learned():
    rng = np.random.default_rng(0)
    rows = Rows(rng.uniform(80, 120, 512), rng.uniform(0, 1, 512), np.full(512, 4.2), np.zeros(512))
    res = tn.train(rows, tn.TrainConfig(lam=0.0, epochs=60, batch_size=64, seed=1))
    pred = tn.predict(res.params, rows.z, rows.tau).y
    assert np.max(np.abs(pred - 4.2)) < 1e-3 * res.params.norm.std_x


def test_training_deterministic_and_decreasing(call_rows):
    cfg = tn.TrainConfig(lam=1.0, epochs=8, seed=3)
    a, b = tn.train(call_rows, cfg), tn.train(call_rows, cfg)
    assert a.history == b.history
    assert all(np.array_equal(x, y) for x, y in zip(a.params.weights, b.params.weights))
    assert len(a.history) == 8
    assert a.history[-1] <= a.initial_loss


def test_lam_zero_trajectory_equals_value_only_trainer(call_rows):
    a = tn.train(call_rows, tn.TrainConfig(lam=0.0, epochs=10, seed=4))
    b = tn.train(call_rows, tn.TrainConfig(lam=0.0, epochs=10, seed=4), value_only=True)
    assert a.history == b.history
    assert all(np.array_equal(x, y) for x, y in zip(a.params.weights, b.params.weights))


def test_normalization_roundtrip_under_rescaling(call_rows):
    alpha = 10.0
    scaled = Rows(alpha * call_rows.z, alpha * call_rows.tau, alpha * call_rows.x, call_rows.q)
    cfg = tn.TrainConfig(lam=1.0, epochs=5, seed=8)
    a, b = tn.train(call_rows, cfg), tn.train(scaled, cfg)
    z, tau = np.linspace(80, 130, 11), np.full(11, 0.5)
    pa, pb = tn.predict(a.params, z, tau), tn.predict(b.params, alpha * z, alpha * tau)
    assert np.allclose(pb.y / alpha, pa.y, rtol=1e-9, atol=1e-9)
    assert np.allclose(pb.dy_dz, pa.dy_dz, rtol=1e-9, atol=1e-9)


def test_divergence_raises_with_epoch(call_rows):
    with pytest.raises(TrainingError) as exc:
        tn.train(call_rows, tn.TrainConfig(lam=1.0, epochs=5, learning_rate=1e200, seed=1))
    assert exc.value.epoch is not None


def test_too_few_rows():
    rows = Rows(np.ones(10), np.ones(10), np.ones(10), np.ones(10))
    with pytest.raises(DomainError):
        tn.train(rows, tn.TrainConfig(batch_size=32))


def test_learning_rate_schedule():
    cfg = tn.TrainConfig()
    assert cfg.lr_at(0) == 1e-2 and cfg.lr_at(59) == 1e-2
    assert cfg.lr_at(60) == pytest.approx(1e-3) and cfg.lr_at(89) == pytest.approx(1e-3)
    assert cfg.lr_at(90) == pytest.approx(1e-4) and cfg.lr_at(99) == pytest.approx(1e-4)


def test_params_json_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    p = random_net(rng, (2, 4, 4, 1), random_norm(rng))
    path = tmp_path / "net.json"
    p.save(path, extra={"seed": 9})
    obj = json.loads(path.read_text())
    assert obj["layer_sizes"] == [2, 4, 4, 1] and obj["seed"] == 9
    q = tn.NetParams.from_json(obj)
    z = np.linspace(80, 120, 7)
    assert np.array_equal(tn.predict(p, z, 0.5).dy_dz, tn.predict(q, z, 0.5).dy_dz)


def test_bad_shapes():
    with pytest.raises(DomainError):
        tn.NetParams([np.ones((2, 3)), np.ones((4, 1))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(DomainError):
        tn.Normalization(std_x=0.0)
