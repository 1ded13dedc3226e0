import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntk_lab import net
from ntk_lab.errors import DimensionMismatch, LayoutMismatch

from oracles import central_diff


def _points(n, d, seed=0):
    return np.random.default_rng(seed).uniform(-2, 2, size=(n, d))


# -- architecture / init ---------------------------------------------------------

def test_param_count():
    arch = net.mlp(3, 5, 1)
    assert arch.n_params == (3 + 1) * 5 + (5 + 1) * 1 == 26
    offsets = [b.offset for b in arch.layout]
    sizes = [b.size for b in arch.layout]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))


def test_architecture_validation():
    with pytest.raises(ValueError):
        net.MlpArchitecture(2, (4, 8))
    with pytest.raises(ValueError):
        net.mlp(2, 4, 1, activation="sigmoid")
    with pytest.raises(ValueError):
        net.mlp(2, 4, 1, parametrization="mup")
    with pytest.raises(ValueError):
        net.mlp(2, 4, 1, sigma_w=(1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        net.mlp(0, 4, 1)


def test_init_is_deterministic():
    arch = net.mlp(2, 64, 2)
    a = net.init_params(arch, 7)
    b = net.init_params(arch, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert not np.array_equal(a.values, net.init_params(arch, 8).values)


def test_init_variance_ntk():
    arch = net.mlp(1, 4096, 2, sigma_w=1.0)
    W = net.init_params(arch, 0).block(2, "W")
    assert 0.95 <= W.var() <= 1.05


def test_init_variance_standard_per_layer():
    n = 2048
    arch = net.mlp(3, n, 2, sigma_w=1.3, parametrization="standard")
    p = net.init_params(arch, 1)
    for layer, fan_in in ((2, n), (3, n)):
        v = p.block(layer, "W").var() * fan_in / 1.3 ** 2
        assert abs(v - 1.0) <= 0.05


def test_widening_preserves_low_index_entries():
    small = net.init_params(net.mlp(2, 16, 2), 3)
    big = net.init_params(net.mlp(2, 64, 2), 3)
    assert np.array_equal(small.block(1, "W"), big.block(1, "W")[:16])
    assert np.array_equal(small.block(2, "W"), big.block(2, "W")[:16, :16])
    assert np.array_equal(small.block(2, "b"), big.block(2, "b")[:16])


def test_standard_init_is_scaled_ntk_init():
    ntk = net.mlp(3, 128, 2)
    std = ntk.with_(parametrization="standard")
    H = net.ScalingMatrixH.for_architecture(ntk)
    mapped = net.map_parametrization(net.init_params(ntk, 5), H, "ntk_to_std")
    assert np.allclose(mapped.values, net.init_params(std, 5).values, rtol=1e-15, atol=0)


# -- forward ---------------------------------------------------------------------

@pytest.mark.parametrize("act", ["erf", "tanh"])
def test_forward_zero_params(act):
    arch = net.mlp(3, 8, 2, activation=act)
    p = net.ParamVector(np.zeros(arch.n_params), arch.layout)
    assert np.all(net.forward(arch, p, _points(5, 3)) == 0.0)


def test_forward_single_layer_by_hand():
    arch = net.MlpArchitecture(2, ())
    p = net.ParamVector(np.array([1.0, 2.0, 0.5]), arch.layout)
    assert net.forward(arch, p, np.array([1.0, 1.0])) == pytest.approx(3 / math.sqrt(2) + 0.5, abs=1e-15)


def test_forward_rejects_wrong_dimension():
    arch = net.mlp(3, 8, 1)
    p = net.init_params(arch, 0)
    with pytest.raises(DimensionMismatch):
        net.forward(arch, p, np.ones((4, 2)))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), depth=st.integers(0, 3),
       act=st.sampled_from(["erf", "tanh", "softplus", "relu"]))
def test_standard_and_ntk_forward_agree(seed, depth, act):
    ntk = net.mlp(3, 16, depth, activation=act)
    std = ntk.with_(parametrization="standard")
    theta = net.init_params(ntk, seed)
    H = net.ScalingMatrixH.for_architecture(ntk)
    theta_std = net.map_parametrization(theta, H, "ntk_to_std")
    X = _points(6, 3, seed % 1000)
    assert np.max(np.abs(net.forward(std, theta_std, X) - net.forward(ntk, theta, X))) <= 1e-12


# -- jacobian --------------------------------------------------------------------

def test_jacobian_single_layer_rows():
    arch = net.MlpArchitecture(3, ())
    X = _points(4, 3)
    J = net.jacobian(arch, net.init_params(arch, 0), X)
    # exact up to the rounding of 1/sqrt(d)
    assert np.max(np.abs(J - np.hstack([X / math.sqrt(3), np.ones((4, 1))]))) <= 1e-15


@pytest.mark.parametrize("act", ["erf", "tanh", "softplus"])
def test_jacobian_matches_finite_differences(act):
    arch = net.mlp(2, 12, 3, activation=act)
    p = net.init_params(arch, 1)
    X = _points(5, 2)
    J = net.jacobian(arch, p, X)
    rng = np.random.default_rng(0)
    f = lambda v: net.forward(arch, p.replace(v), X)
    for _ in range(5):
        v = rng.standard_normal(arch.n_params)
        v /= np.linalg.norm(v)
        fd = central_diff(f, p.values, v)
        assert np.linalg.norm(J @ v - fd) <= 1e-5 * np.linalg.norm(fd)
    # a few individual coordinates too
    for i in rng.choice(arch.n_params, 8, replace=False):
        e = np.zeros(arch.n_params)
        e[i] = 1.0
        fd = central_diff(f, p.values, e)
        assert np.max(np.abs(J[:, i] - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_last_layer_jacobian_block(depth):
    n = 32
    arch = net.mlp(2, n, depth)
    p = net.init_params(arch, 2)
    X = _points(4, 2)
    J = net.jacobian(arch, p, X)
    cache = net.forward_cache(arch, p, X)
    blk = next(b for b in arch.layout if b.layer == depth + 1 and b.kind == "W")
    assert np.allclose(J[:, blk.slice], cache.post[depth] / math.sqrt(n), rtol=0, atol=1e-15)


def test_jacobian_parametrization_relation():
    ntk = net.mlp(2, 24, 2)
    std = ntk.with_(parametrization="standard")
    theta = net.init_params(ntk, 4)
    H = net.ScalingMatrixH.for_architecture(ntk)
    X = _points(5, 2)
    J_ntk = net.jacobian(ntk, theta, X)
    J_std = net.jacobian(std, net.map_parametrization(theta, H, "ntk_to_std"), X)
    assert np.max(np.abs(J_ntk - J_std * np.sqrt(H.diagonal))) <= 1e-10


def test_push_and_pullback_are_adjoint():
    arch = net.mlp(2, 16, 2)
    p = net.init_params(arch, 3)
    X = _points(6, 2)
    cache = net.forward_cache(arch, p, X)
    deltas = net.unit_deltas(arch, p, cache)
    J = net.jacobian(arch, p, X)
    rng = np.random.default_rng(1)
    v = rng.standard_normal(arch.n_params)
    g = rng.standard_normal(6)
    assert np.allclose(net.push(arch, cache, deltas, v), J @ v, atol=1e-12)
    assert np.allclose(net.pullback(arch, cache, deltas, g), J.T @ g, atol=1e-12)
    K = net.gram_from_caches(arch, cache, deltas, cache, deltas)
    assert np.allclose(K, J @ J.T, atol=1e-12)
    traces = net.block_traces(arch, cache, deltas)
    assert sum(traces.values()) == pytest.approx(np.trace(J @ J.T), rel=1e-12)


def test_jacobian_drift_matches_dense():
    arch = net.mlp(2, 16, 2)
    p0 = net.init_params(arch, 3)
    p1 = p0.replace(p0.values + 0.05 * np.random.default_rng(0).standard_normal(arch.n_params))
    X = _points(5, 2)
    blocks = net.trainable_blocks(arch)
    mask = net.trainable_mask(arch)
    c0, c1 = net.forward_cache(arch, p0, X), net.forward_cache(arch, p1, X)
    d0, d1 = net.unit_deltas(arch, p0, c0), net.unit_deltas(arch, p1, c1)
    dense = np.linalg.norm((net.jacobian(arch, p1, X) - net.jacobian(arch, p0, X))[:, mask])
    assert net.jacobian_drift(arch, c1, d1, c0, d0, blocks) == pytest.approx(dense, rel=1e-10)


def test_trainable_mask_rule():
    arch = net.mlp(2, 8, 2)
    assert net.trainable_blocks(arch) == {(2, "W"), (3, "W"), (3, "b")}
    full = arch.with_(train_first_layer_and_biases=True)
    assert len(net.trainable_blocks(full)) == 6
    assert net.trainable_mask(full).all()
    assert net.trainable_mask(arch).sum() == 8 * 8 + 8 + 1


# -- parametrization mapping -----------------------------------------------------

def test_map_round_trip_and_blocks():
    arch = net.mlp(3, 10, 2, parametrization="standard")
    H = net.ScalingMatrixH.for_architecture(arch)
    p = net.init_params(arch, 0)
    back = net.map_parametrization(net.map_parametrization(p, H, "std_to_ntk"), H, "ntk_to_std")
    assert np.max(np.abs(back.values - p.values)) <= 1e-15
    assert np.all(H.diagonal > 0)

    v = np.zeros(arch.n_params)
    v[0] = 0.9
    bias = arch.layout[1]
    v[bias.slice] = 0.25
    mapped = net.map_parametrization(p.replace(v), H, "std_to_ntk")
    assert mapped.values[0] == pytest.approx(0.9 * math.sqrt(3), rel=1e-15)
    assert np.all(mapped.values[bias.slice] == 0.25)
    assert np.all(net.map_parametrization(p.replace(v), H, "ntk_to_std").values[bias.slice] == 0.25)


def test_map_layout_mismatch():
    H = net.ScalingMatrixH.for_architecture(net.mlp(3, 10, 2))
    with pytest.raises(LayoutMismatch):
        net.map_parametrization(net.init_params(net.mlp(3, 11, 2), 0), H, "std_to_ntk")
    with pytest.raises(LayoutMismatch):
        net.ParamVector(np.zeros(3), net.mlp(3, 10, 2).layout)


# -- shifted network and zeroed output layer --------------------------------------

def test_shifted_forward_at_init_is_prior():
    arch = net.mlp(2, 16, 2)
    p0 = net.init_params(arch, 0)
    X = _points(7, 2)
    for m in (net.PriorMean.zero(), net.PriorMean.constant(1.5),
              net.PriorMean.tabulated(lambda Z: np.sin(Z[:, 0]) * Z[:, 1])):
        assert np.array_equal(net.shifted_forward(arch, p0, p0, m, X), m(X))


def test_shifted_forward_recomputation():
    arch = net.mlp(2, 16, 2)
    p0 = net.init_params(arch, 0)
    p1 = net.init_params(arch, 1)
    X = _points(7, 2)
    diff = net.forward(arch, p1, X) - net.forward(arch, p0, X)
    assert np.allclose(net.shifted_forward(arch, p1, p0, net.PriorMean.zero(), X), diff, rtol=0, atol=0)
    got = net.shifted_forward(arch, p1, p0, net.PriorMean.constant(1.0), X)
    assert np.max(np.abs(got - (diff + 1.0))) <= 1e-15
    x = X[0]
    assert isinstance(net.shifted_forward(arch, p1, p0, net.PriorMean.zero(), x), float)


def test_zero_last_layer():
    arch = net.mlp(2, 32, 2)
    p = net.init_params(arch, 0)
    z = net.zero_last_layer(p)
    X = _points(6, 2)
    assert np.all(net.forward(arch, z, X) == 0.0)
    J = net.jacobian(arch, z, X)
    for b in arch.layout:
        if b.layer <= arch.depth:
            assert np.all(J[:, b.slice] == 0.0)
        else:
            assert np.array_equal(z.block(b.layer, b.kind), np.zeros(b.shape))
    # other blocks untouched
    for b in arch.layout[:-2]:
        assert np.array_equal(z.values[b.slice], p.values[b.slice])


def test_prior_mean_shapes():
    X = np.linspace(0, 1, 5)
    assert net.PriorMean.constant(2.0)(X).shape == (5,)
    assert np.all(net.PriorMean.zero()(X.reshape(-1, 1)) == 0)
    assert "constant" in repr(net.PriorMean.constant(2.0))
