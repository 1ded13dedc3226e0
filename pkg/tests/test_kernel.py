import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntk_lab import kernel, lin, net
from ntk_lab.errors import DimensionMismatch, DivergentLearningRate

from oracles import euler


def _points(n, d=1, seed=0):
    return np.random.default_rng(seed).uniform(-3, 3, size=(n, d))


@pytest.fixture(scope="module")
def problem():
    """A small trained-from-scratch setup: Gram blocks, f0 and labels."""
    arch = net.mlp(1, 64, 2)
    p0 = net.init_params(arch, 0)
    X, Xt = _points(12, seed=1), _points(5, seed=2)
    state = lin.LinearizedState(arch, p0, X)
    y = np.sin(X[:, 0]) + np.cos(2 * X[:, 0])
    return dict(arch=arch, p0=p0, X=X, Xt=Xt, state=state, y=y,
                K_xx=state.gram.values, K_tx=state.cross_gram(Xt).values,
                f0=state.f0_train, f0t=net.forward(arch, p0, Xt))


def _min_max_eig(K):
    w = np.linalg.eigvalsh(np.asarray(K))
    return w[0], w[-1]


# -- Gram assembly ---------------------------------------------------------------

def test_empirical_ntk_of_identical_rows_is_psd(problem):
    J = net.jacobian(problem["arch"], problem["p0"], problem["X"])
    K = kernel.empirical_ntk(J, J)
    assert np.array_equal(K.values, K.values.T)
    lo, hi = _min_max_eig(K)
    assert lo >= -1e-8 * hi
    assert K.kind == "ntk" and K.shape == (12, 12)


def test_empirical_ntk_single_layer_closed_form():
    d = 3
    arch = net.MlpArchitecture(d, ())
    X, Xt = _points(6, d, 1), _points(4, d, 2)
    p = net.init_params(arch, 0)
    K = kernel.empirical_ntk(net.jacobian(arch, p, Xt), net.jacobian(arch, p, X))
    assert np.max(np.abs(K.values - (Xt @ X.T / d + 1.0))) <= 1e-14
    K2 = kernel.network_ntk(arch, p, Xt, X)
    assert np.max(np.abs(K2.values - (Xt @ X.T / d + 1.0))) <= 1e-14


def test_empirical_ntk_mask_and_errors(problem):
    arch, p0, X = problem["arch"], problem["p0"], problem["X"]
    J = net.jacobian(arch, p0, X)
    mask = net.trainable_mask(arch)
    K = kernel.empirical_ntk(J, J, mask)
    assert np.allclose(K.values, problem["K_xx"], atol=1e-12)
    assert np.allclose(kernel.network_ntk(arch, p0, X).values, problem["K_xx"], atol=1e-12)
    with pytest.raises(DimensionMismatch):
        kernel.empirical_ntk(J, J[:, :-1])
    with pytest.raises(DimensionMismatch):
        kernel.empirical_ntk(J, J, mask[:-1])


def test_empirical_ntk_concentrates_at_large_width():
    arch = net.mlp(1, 4096, 2)
    # inputs in the unit ball, where no kernel entry is close to zero
    X = np.linspace(-1.0, 1.0, 8).reshape(-1, 1)
    K0 = kernel.network_ntk(arch, net.init_params(arch, 0), X).values
    K1 = kernel.network_ntk(arch, net.init_params(arch, 1), X).values
    assert np.max(np.abs(K0 - K1) / np.abs(K0)) <= 0.1


def test_gram_matrix_type():
    G = kernel.GramMatrix(np.arange(6.0).reshape(2, 3), "nngp", 10, 4)
    assert G.T.shape == (3, 2) and G.T.kind == "nngp"
    assert np.asarray(G).shape == (2, 3)
    with pytest.raises(ValueError):
        kernel.GramMatrix(np.eye(2), "rbf")
    with pytest.raises(DimensionMismatch):
        kernel.GramMatrix(np.ones(3))


# -- NNGP ------------------------------------------------------------------------

def test_nngp_single_layer_formula():
    d = 2
    X, Xt = _points(5, d, 1), _points(3, d, 2)
    K = kernel.empirical_nngp(X, Xt, sigma_w_last=1.5, sigma_b_last=0.2)
    assert np.allclose(K.values, 1.5 ** 2 * Xt @ X.T / d + 0.04, atol=1e-14)
    assert K.kind == "nngp"


def test_nngp_psd_on_coincident_points(problem):
    K = kernel.network_nngp(problem["arch"], problem["p0"], problem["X"])
    lo, hi = _min_max_eig(K)
    assert lo >= -1e-8 * hi
    with pytest.raises(DimensionMismatch):
        kernel.empirical_nngp(np.ones((3, 4)), np.ones((2, 5)))


def test_nngp_matches_monte_carlo_output_covariance():
    width, M = 1024, 500
    arch = net.mlp(1, width, 1)
    X = np.linspace(-2.0, 2.0, 6).reshape(-1, 1)
    outs = np.array([net.forward(arch, net.init_params(arch, s), X) for s in range(M)])
    K = kernel.network_nngp(arch, net.init_params(arch, 10_000), X).values
    centred = outs - outs.mean(axis=0)
    cov = centred.T @ centred / (M - 1)
    prods = centred[:, :, None] * centred[:, None, :]
    se = prods.std(axis=0, ddof=1) / math.sqrt(M)
    assert np.all(np.abs(cov - K) <= 3 * se)


def test_zero_last_layer_ntk_identity():
    n = 512
    arch = net.mlp(2, n, 2)
    p = net.zero_last_layer(net.init_params(arch, 0))
    X = _points(16, 2, 3)
    Theta = kernel.empirical_ntk(*(2 * [net.jacobian(arch, p, X)])).values
    xL = net.forward_cache(arch, p, X).post[arch.depth]
    assert np.max(np.abs(Theta - (xL @ xL.T / n + 1.0))) <= 1e-12


# -- posterior mean --------------------------------------------------------------

def test_posterior_identity_kernel():
    y = np.array([1.0, -3.0, 0.5])
    out = kernel.posterior_mean(np.eye(3), np.eye(3), y, np.zeros(3), np.zeros(3), 1.0)
    assert np.allclose(out, y / 2, atol=1e-15)


def test_posterior_large_noise_returns_prior(problem):
    m_test = np.array([0.3, -0.2, 1.0, 0.0, 2.0])
    out = kernel.posterior_mean(problem["K_xx"], problem["K_tx"], problem["y"],
                                np.zeros(12), m_test, 1e8)
    assert np.max(np.abs(out - m_test)) <= 1e-6


def test_posterior_two_point_hand_case():
    out = kernel.posterior_mean(np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([[1.0, 0.0]]),
                                np.array([1.0, 0.0]), 0.0, 0.0, 0.0)
    assert out[0] == pytest.approx(2 / 3, abs=1e-15)


def test_posterior_interpolates_without_noise(problem):
    K = problem["K_xx"]
    out = kernel.posterior_mean(K, K, problem["y"], problem["f0"], problem["f0"], 0.0)
    assert np.max(np.abs(out - problem["y"])) <= 1e-6 * np.max(np.abs(problem["y"]))


@settings(max_examples=20, deadline=None)
@given(c=st.floats(1e-3, 1e3), beta=st.floats(1e-3, 10.0))
def test_posterior_scale_invariance(problem, c, beta):
    K_xx, K_tx, y = problem["K_xx"], problem["K_tx"], problem["y"]
    a = kernel.posterior_mean(K_xx, K_tx, y, 0.1, -0.2, beta)
    b = kernel.posterior_mean(c * K_xx, c * K_tx, y, 0.1, -0.2, c * beta)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(a))


def test_posterior_errors_and_empty_training_set():
    with pytest.raises(ValueError):
        kernel.posterior_mean(np.eye(2), np.eye(2), np.ones(2), 0, 0, -1.0)
    with pytest.raises(DimensionMismatch):
        kernel.posterior_mean(np.eye(3), np.eye(2), np.ones(2), 0, 0, 1.0)
    out = kernel.posterior_mean(np.zeros((0, 0)), np.zeros((3, 0)), np.zeros(0), 0.0,
                                np.array([1.0, 2.0, 3.0]), 0.5)
    assert np.array_equal(out, [1.0, 2.0, 3.0])


# -- linearized predictions ------------------------------------------------------

def _args(p):
    return p["K_tx"], p["K_xx"], p["f0t"], p["f0"], p["y"]


def test_flow_at_time_zero(problem):
    eta = kernel.stable_learning_rate(problem["K_xx"], 0.5)
    assert np.array_equal(kernel.lin_prediction_flow(*_args(problem), 0.5, eta, 0.0), problem["f0t"])


def test_flow_long_time_is_posterior(problem):
    eta = kernel.stable_learning_rate(problem["K_xx"], 0.5)
    post = kernel.posterior_mean(problem["K_xx"], problem["K_tx"], problem["y"],
                                 problem["f0"], problem["f0t"], 0.5)
    for t in (1e9, math.inf):
        got = kernel.lin_prediction_flow(*_args(problem), 0.5, eta, t)
        assert np.max(np.abs(got - post)) <= 1e-9 * np.max(np.abs(post))


def test_flow_matches_euler(problem):
    K_tx, K_xx, f0t, f0, y = _args(problem)
    beta, eta = 0.5, 0.05
    # the linearized function-space ODE, with the test outputs carried along
    # through the kernel coefficients a(t): f(x') = f0(x') + K_tx a
    n = len(y)

    def rhs(a):
        return -eta * ((f0 + K_xx @ a - y) + beta * a)

    a1 = euler(rhs, np.zeros(n), 1.0, 1e-4)
    got = kernel.lin_prediction_flow(K_tx, K_xx, f0t, f0, y, beta, eta, 1.0)
    assert np.max(np.abs(got - (f0t + K_tx @ a1))) <= 1e-3


def test_flow_residual_decays_per_eigencomponent(problem):
    K_xx, f0, y = problem["K_xx"], problem["f0"], problem["y"]
    beta, eta = 0.5, 0.01
    w, Q = np.linalg.eigh(K_xx)
    r0 = Q.T @ (y - f0)
    # residual of the coefficient vector a(t) relative to its limit a_inf
    a_inf = np.linalg.solve(K_xx + beta * np.eye(len(y)), y - f0)
    for t in (0.5, 2.0, 8.0):
        pred = kernel.lin_prediction_flow(K_xx, K_xx, f0, f0, y, beta, eta, t)
        lim = kernel.lin_prediction_flow(K_xx, K_xx, f0, f0, y, beta, eta, math.inf)
        proj = Q.T @ (lim - pred)
        expected = w * np.exp(-eta * (w + beta) * t) * (Q.T @ a_inf)
        assert np.allclose(proj, expected, atol=1e-10 * np.max(np.abs(r0)))


def test_gd_steps_zero(problem):
    assert np.array_equal(kernel.lin_prediction_gd(*_args(problem), 0.5, 0.01, 0), problem["f0t"])


def test_gd_matches_parameter_iteration(problem):
    st_ = problem["state"]
    beta = 0.5
    eta = kernel.stable_learning_rate(problem["K_xx"], beta)
    theta = lin.lin_params_gd_iterate(st_, problem["y"], beta, eta, 50)
    via_params = st_.predict(theta, problem["Xt"])
    got = kernel.lin_prediction_gd(*_args(problem), beta, eta, 50)
    assert np.max(np.abs(got - via_params)) <= 1e-10


def test_gd_divergent_rate(problem):
    beta = 0.5
    lam = np.linalg.eigvalsh(problem["K_xx"])[-1]
    with pytest.raises(DivergentLearningRate):
        kernel.lin_prediction_gd(*_args(problem), beta, 3.0 / (lam + beta), 200)
    # a few steps past the ceiling are tolerated, as is any rate inside it
    kernel.lin_prediction_gd(*_args(problem), beta, 3.0 / (lam + beta), 5)
    kernel.lin_prediction_gd(*_args(problem), beta, 1.9 / (lam + beta), 10_000)
    with pytest.raises(DivergentLearningRate):
        kernel.check_gd_rate(problem["K_xx"], beta, -1.0)


def test_gd_flow_and_posterior_limits_agree(problem):
    beta = 0.5
    eta = kernel.stable_learning_rate(problem["K_xx"], beta)
    post = kernel.posterior_mean(problem["K_xx"], problem["K_tx"], problem["y"],
                                 problem["f0"], problem["f0t"], beta)
    gd = kernel.lin_prediction_gd(*_args(problem), beta, eta, 10**9)
    fl = kernel.lin_prediction_flow(*_args(problem), beta, eta, math.inf)
    scale = np.max(np.abs(post))
    assert np.max(np.abs(gd - post)) <= 1e-9 * scale
    assert np.max(np.abs(fl - post)) <= 1e-9 * scale


def test_spectral_coefficients():
    mu = np.array([0.0, 1e-20, 0.5, 2.0])
    assert np.allclose(kernel.flow_coefficients(mu, 0.1, 3.0),
                       [0.3, 0.3, (1 - math.exp(-0.15)) / 0.5, (1 - math.exp(-0.6)) / 2.0], rtol=1e-14)
    g = kernel.gd_coefficients(mu, 0.1, 7)
    assert np.allclose(g, [0.7, 0.7, (1 - 0.95 ** 7) / 0.5, (1 - 0.8 ** 7) / 2.0], rtol=1e-14)
    # beyond the unit interval the plain power form applies
    assert kernel.gd_coefficients(np.array([15.0]), 0.1, 3)[0] == pytest.approx((1 - (-0.5) ** 3) / 15)


def test_eig_cache_hits(problem):
    a = kernel.cached_eig(problem["K_xx"])
    b = kernel.cached_eig(problem["K_xx"].copy())
    assert a is b


# -- ensemble moments ------------------------------------------------------------

def test_ensemble_moments_collapse_to_gp_posterior(problem):
    K_xx, K_tx = problem["K_xx"], problem["K_tx"]
    K_tt = kernel.network_ntk(problem["arch"], problem["p0"], problem["Xt"]).values
    mu, Sigma = kernel.ensemble_moments(K_tx, K_xx, K_tt, K_tx, K_xx, problem["y"], 0.0)
    expected = K_tt - K_tx @ np.linalg.solve(K_xx, K_tx.T)
    assert np.allclose(Sigma, expected, atol=1e-8 * np.max(np.abs(K_tt)))
    assert np.array_equal(Sigma, Sigma.T)


def test_ensemble_moments_large_noise(problem):
    K_xx, K_tx = problem["K_xx"], problem["K_tx"]
    K_tt = kernel.network_ntk(problem["arch"], problem["p0"], problem["Xt"]).values
    mu, Sigma = kernel.ensemble_moments(K_tx, K_xx, K_tt, K_tx, K_xx, problem["y"], 1e8)
    assert np.max(np.abs(mu)) <= 1e-6
    assert np.max(np.abs(Sigma - K_tt)) <= 1e-6 * np.max(np.abs(K_tt))
    with pytest.raises(DimensionMismatch):
        kernel.ensemble_moments(K_tx, K_xx, K_tt[:2, :2], K_tx, K_xx, problem["y"], 1.0)
