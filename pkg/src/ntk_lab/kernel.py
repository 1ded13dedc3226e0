"""Gram matrices (empirical NTK / NNGP), the noisy NTK-GP posterior mean, and
finite-time predictions of the linearized network in function space.

With ``A = Theta + beta I`` and ``r = y - f0(x)`` the linearized network at time
``t`` predicts ``f0(x') + Theta_{x'x} c_t(A) r``, where ``c_t`` is a spectral
function of ``A``: ``(1 - exp(-eta t mu)) / mu`` for gradient flow and
``(1 - (1 - eta mu)^t) / mu`` for gradient descent.  Both are evaluated on the
eigenvalues ``mu`` of ``A`` and continue smoothly to ``eta t`` at ``mu = 0``.
"""
from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import linalg, net
from .errors import DimensionMismatch, DivergentLearningRate

GRAM_KINDS = ("ntk", "nngp")

# steps allowed past the stability ceiling before lin_prediction_gd refuses
DIVERGENCE_STEPS = 10


@dataclass(frozen=True)
class GramMatrix:
    """A kernel matrix ``K[i, j] = k(x'_i, x_j)`` tagged with how it was built."""

    values: np.ndarray
    kind: str = "ntk"
    width_used: int = 0
    seed_used: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionMismatch(f"a Gram matrix must be 2-D, got shape {v.shape}")
        if self.kind not in GRAM_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape

    @property
    def T(self):
        return GramMatrix(self.values.T, self.kind, self.width_used, self.seed_used)


def _arr(K):
    return K.values if isinstance(K, GramMatrix) else np.asarray(K, dtype=np.float64)


def empirical_ntk(J_test, J_train, mask=None, width_used=0, seed_used=None):
    """``J_test J_train^T``, optionally restricted to the columns where ``mask`` is true."""
    J_test = np.asarray(J_test, dtype=np.float64)
    J_train = np.asarray(J_train, dtype=np.float64)
    if J_test.ndim != 2 or J_train.ndim != 2 or J_test.shape[1] != J_train.shape[1]:
        raise DimensionMismatch(
            f"Jacobians of shapes {J_test.shape} and {J_train.shape} do not share p")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (J_train.shape[1],):
            raise DimensionMismatch("mask length differs from the number of parameters")
        J_test, J_train = J_test[:, mask], J_train[:, mask]
    return GramMatrix(J_test @ J_train.T, "ntk", width_used, seed_used)


def network_ntk(arch, params, X_test, X_train=None, seed=None, blocks=None):
    """Empirical NTK of ``arch`` at ``params`` over its trainable blocks.

    Assembled per block from forward activations and back-propagated
    sensitivities, so the ``N x p`` Jacobian is never formed.
    """
    if blocks is None:
        blocks = net.trainable_blocks(arch)
    ca = net.forward_cache(arch, params, X_test)
    da = net.unit_deltas(arch, params, ca)
    if X_train is None:
        cb, db = ca, da
    else:
        cb = net.forward_cache(arch, params, X_train)
        db = net.unit_deltas(arch, params, cb)
    K = net.gram_from_caches(arch, ca, da, cb, db, blocks)
    if X_train is None:
        K = 0.5 * (K + K.T)
    return GramMatrix(K, "ntk", arch.width, seed)


def empirical_nngp(features_train, features_test=None, sigma_w_last=1.0, sigma_b_last=0.1,
                   width_used=None, seed_used=None):
    """Output covariance given the penultimate features:
    ``sigma_w^2 (x^L . x'^L) / n + sigma_b^2``.  Rows index the test set.
    """
    Ftr = np.asarray(features_train, dtype=np.float64)
    Fte = Ftr if features_test is None else np.asarray(features_test, dtype=np.float64)
    if Ftr.ndim != 2 or Fte.ndim != 2 or Ftr.shape[1] != Fte.shape[1]:
        raise DimensionMismatch("feature matrices must share their column count")
    n = Ftr.shape[1]
    K = sigma_w_last ** 2 * (Fte @ Ftr.T) / n + sigma_b_last ** 2
    if features_test is None:
        K = 0.5 * (K + K.T)
    return GramMatrix(K, "nngp", n if width_used is None else width_used, seed_used)


def network_nngp(arch, params, X_test, X_train=None, seed=None):
    """``empirical_nngp`` on the penultimate activations of ``arch`` at ``params``."""
    last = arch.depth + 1
    fa = net.forward_cache(arch, params, X_test).post[last - 1]
    fb = None if X_train is None else net.forward_cache(arch, params, X_train).post[last - 1]
    if fb is None:
        return empirical_nngp(fa, None, arch.sigma_w[-1], arch.sigma_b[-1], arch.width, seed)
    return empirical_nngp(fb, fa, arch.sigma_w[-1], arch.sigma_b[-1], arch.width, seed)


# ---------------------------------------------------------------------------
# eigendecompositions, cached by content

_EIG_CACHE: OrderedDict = OrderedDict()
_EIG_CACHE_SIZE = 8


def cached_eig(K):
    """``linalg.sym_eig`` of ``K``, memoized on the matrix bytes."""
    K = np.ascontiguousarray(_arr(K))
    key = (K.shape, hashlib.blake2b(K.tobytes(), digest_size=16).digest())
    hit = _EIG_CACHE.get(key)
    if hit is not None:
        _EIG_CACHE.move_to_end(key)
        return hit
    eig = linalg.sym_eig(K)
    _EIG_CACHE[key] = eig
    if len(_EIG_CACHE) > _EIG_CACHE_SIZE:
        _EIG_CACHE.popitem(last=False)
    return eig


def max_eig(K):
    """Largest eigenvalue of a PSD Gram matrix."""
    K = _arr(K)
    if K.shape[0] <= 64:
        return float(cached_eig(K).eigenvalues[-1])
    return linalg.max_eigenvalue(K)


def stable_learning_rate(K, beta):
    """Default step ``1 / (lambda_max + beta)``: half the descent stability ceiling."""
    return 1.0 / (max_eig(K) + beta)


# ---------------------------------------------------------------------------
# posterior mean and linearized predictions

def _check_kernels(K_xx, K_tx, n_train):
    if K_xx.shape != (n_train, n_train):
        raise DimensionMismatch(f"K_xx has shape {K_xx.shape}, expected {(n_train, n_train)}")
    if K_tx.ndim != 2 or K_tx.shape[1] != n_train:
        raise DimensionMismatch(f"K_tx has shape {K_tx.shape}, expected (*, {n_train})")


def posterior_mean(K_xx, K_tx, y, m_train, m_test, beta):
    """``m(x') + K_{x'x} (K_xx + beta I)^{-1} (y - m(x))`` via a Cholesky solve."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    K_xx, K_tx = _arr(K_xx), _arr(K_tx)
    y = np.asarray(y, dtype=np.float64)
    _check_kernels(K_xx, K_tx, y.shape[0])
    m_train = np.broadcast_to(np.asarray(m_train, dtype=np.float64), y.shape)
    m_test = np.broadcast_to(np.asarray(m_test, dtype=np.float64), (K_tx.shape[0],))
    if y.shape[0] == 0:
        return np.array(m_test, dtype=np.float64)
    A = K_xx + beta * np.eye(y.shape[0])
    alpha = linalg.cholesky_solve(A, y - m_train)
    return m_test + K_tx @ alpha


def flow_coefficients(mu, eta0, t):
    """``(1 - exp(-eta t mu)) / mu`` with its ``mu -> 0`` limit ``eta t``."""
    mu = np.asarray(mu, dtype=np.float64)
    s = eta0 * t
    out = np.empty_like(mu)
    small = np.abs(mu * s) < 1e-300
    out[small] = s
    m = mu[~small]
    out[~small] = -np.expm1(-s * m) / m
    return out


def gd_coefficients(mu, eta0, steps):
    """``(1 - (1 - eta mu)^steps) / mu`` with its ``mu -> 0`` limit ``eta steps``."""
    mu = np.asarray(mu, dtype=np.float64)
    em = eta0 * mu
    out = np.empty_like(mu)
    zero = em == 0.0
    out[zero] = eta0 * steps
    # log1p keeps precision for eta*mu near zero; (1 - em) <= 0 needs the power
    inside = ~zero & (em < 1.0)
    out[inside] = -np.expm1(steps * np.log1p(-em[inside])) / mu[inside]
    rest = ~zero & ~inside
    with np.errstate(over="ignore", invalid="ignore"):
        out[rest] = (1.0 - (1.0 - em[rest]) ** steps) / mu[rest]
    return out


def _residual_inputs(K_tx, K_xx, f0_test, f0_train, y):
    K_xx, K_tx = _arr(K_xx), _arr(K_tx)
    y = np.asarray(y, dtype=np.float64)
    _check_kernels(K_xx, K_tx, y.shape[0])
    f0_train = np.asarray(f0_train, dtype=np.float64)
    f0_test = np.asarray(f0_test, dtype=np.float64)
    if f0_train.shape != y.shape or f0_test.shape != (K_tx.shape[0],):
        raise DimensionMismatch("initial predictions do not match the kernel shapes")
    return K_tx, K_xx, f0_test, y - f0_train


def _spectral_prediction(K_tx, K_xx, f0_test, r, beta, coeff):
    eig = cached_eig(K_xx)
    Q = eig.eigenvectors
    c = coeff(eig.eigenvalues + beta)
    return f0_test + K_tx @ (Q @ (c * (Q.T @ r)))


def check_gd_rate(K_xx, beta, eta0, steps=None):
    """Raise ``DivergentLearningRate`` when ``eta0 (lambda_max + beta) >= 2``.

    With ``steps`` given, a handful of steps (``DIVERGENCE_STEPS``) are allowed
    since the blow-up is only geometric.
    """
    if eta0 <= 0:
        raise DivergentLearningRate("learning rate must be positive")
    lam = float(cached_eig(K_xx).eigenvalues[-1])
    ceiling = 2.0 / (lam + beta)
    if eta0 >= ceiling and (steps is None or steps > DIVERGENCE_STEPS):
        raise DivergentLearningRate(
            f"eta0={eta0:.6g} is outside the convergent range (0, {ceiling:.6g})")
    return ceiling


def lin_prediction_flow(K_tx, K_xx, f0_test, f0_train, y, beta, eta0, t):
    """Linearized-network prediction after gradient flow for time ``t`` (may be ``inf``)."""
    if beta < 0 or t < 0:
        raise ValueError("beta and t must be nonnegative")
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    K_tx, K_xx, f0_test, r = _residual_inputs(K_tx, K_xx, f0_test, f0_train, y)
    if t == 0 or r.shape[0] == 0:
        return f0_test.copy()
    if math.isinf(t):
        return posterior_mean(K_xx, K_tx, y, f0_train, f0_test, beta)
    return _spectral_prediction(K_tx, K_xx, f0_test, r, beta,
                                lambda mu: flow_coefficients(mu, eta0, t))


def lin_prediction_gd(K_tx, K_xx, f0_test, f0_train, y, beta, eta0, steps):
    """Linearized-network prediction after ``steps`` of full-batch gradient descent."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    steps = int(steps)
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    K_tx, K_xx, f0_test, r = _residual_inputs(K_tx, K_xx, f0_test, f0_train, y)
    if steps == 0 or r.shape[0] == 0:
        return f0_test.copy()
    check_gd_rate(K_xx, beta, eta0, steps)
    return _spectral_prediction(K_tx, K_xx, f0_test, r, beta,
                                lambda mu: gd_coefficients(mu, eta0, steps))


def ensemble_moments(Theta_tx, Theta_xx, K_tt, K_tx, K_xx, y, beta):
    """Mean and covariance, over initializations, of the converged linearized network.

    ``mu = A y`` and ``Sigma = K_tt + A K_xx A^T - A K_xt - K_tx A^T`` with
    ``A = Theta_tx (Theta_xx + beta I)^{-1}``.
    """
    Theta_tx, Theta_xx = _arr(Theta_tx), _arr(Theta_xx)
    K_tt, K_tx, K_xx = _arr(K_tt), _arr(K_tx), _arr(K_xx)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    _check_kernels(Theta_xx, Theta_tx, n)
    _check_kernels(K_xx, K_tx, n)
    m = Theta_tx.shape[0]
    if K_tt.shape != (m, m) or K_tx.shape[0] != m:
        raise DimensionMismatch("test-point kernels disagree on the number of test points")
    A = linalg.cholesky_solve(Theta_xx + beta * np.eye(n), Theta_tx.T).T
    mu = A @ y
    cross = A @ K_tx.T
    Sigma = K_tt + A @ K_xx @ A.T - cross - cross.T
    return mu, 0.5 * (Sigma + Sigma.T)
