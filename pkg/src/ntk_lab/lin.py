"""The network linearized at initialization, in parameter space.

``f_lin(x, theta) = f(x, theta_0) + J(x, theta_0)(theta - theta_0)``.  Every
closed form here is evaluated in the N-dimensional kernel space and pulled
back through ``J_0^T``; the ``N x p`` Jacobian is only built on request.
"""
from __future__ import annotations

import math
from functools import cached_property

import numpy as np

from . import kernel, linalg, net
from .errors import DimensionMismatch, DivergentLearningRate, LayoutMismatch

# consecutive gradient-norm increases that mark a divergent step size
GROWTH_STEPS = 10


class LinearizedState:
    """Everything about ``theta_0`` the linearized model needs on the training set."""

    def __init__(self, arch, theta0, x_train, blocks=None):
        self.arch = arch
        self.theta0 = theta0
        self.x_train = net._as_inputs(arch, x_train)
        self.blocks = net.trainable_blocks(arch) if blocks is None else set(blocks)
        self.cache0 = net.forward_cache(arch, theta0, self.x_train)
        self.deltas0 = net.unit_deltas(arch, theta0, self.cache0)
        self.f0_train = self.cache0.output.copy()

    @property
    def n_train(self):
        return self.x_train.shape[0]

    @cached_property
    def gram(self):
        """Empirical NTK on the training points, trainable blocks only."""
        K = net.gram_from_caches(self.arch, self.cache0, self.deltas0,
                                 self.cache0, self.deltas0, self.blocks)
        return kernel.GramMatrix(0.5 * (K + K.T), "ntk", self.arch.width)

    @cached_property
    def J0(self):
        """Dense Jacobian at ``theta_0``; frozen columns are zero."""
        J = net.jacobian(self.arch, self.theta0, self.x_train)
        J[:, ~self.mask] = 0.0
        return J

    @cached_property
    def mask(self):
        mask = np.zeros(self.arch.n_params, dtype=bool)
        for b in self.arch.layout:
            if (b.layer, b.kind) in self.blocks:
                mask[b.slice] = True
        return mask

    def pullback(self, a):
        """``J_0^T a`` as a flat parameter vector."""
        return net.pullback(self.arch, self.cache0, self.deltas0, a, self.blocks)

    def push(self, v):
        """``J_0 v`` on the training points."""
        return net.push(self.arch, self.cache0, self.deltas0, v, self.blocks)

    def cross_gram(self, X):
        """Empirical NTK between ``X`` (rows) and the training points."""
        c = net.forward_cache(self.arch, self.theta0, X)
        d = net.unit_deltas(self.arch, self.theta0, c)
        K = net.gram_from_caches(self.arch, c, d, self.cache0, self.deltas0, self.blocks)
        return kernel.GramMatrix(K, "ntk", self.arch.width)

    def predict(self, theta, X=None):
        """``f_lin(X, theta)``; defaults to the training points."""
        dv = theta.values - self.theta0.values
        if X is None:
            return self.f0_train + self.push(dv)
        c = net.forward_cache(self.arch, self.theta0, X)
        d = net.unit_deltas(self.arch, self.theta0, c)
        return c.output + net.push(self.arch, c, d, dv, self.blocks)

    def residual(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.n_train,):
            raise DimensionMismatch(f"expected {self.n_train} targets, got {y.shape}")
        return y - self.f0_train


def kernel_coefficients(state, y, beta, eta0, t):
    """``a_t`` with ``theta_lin(t) = theta_0 + J_0^T a_t`` under gradient flow."""
    r = state.residual(y)
    if math.isinf(t):
        A = state.gram.values + beta * np.eye(state.n_train)
        return linalg.cholesky_solve(A, r)
    if t == 0:
        return np.zeros_like(r)
    eig = kernel.cached_eig(state.gram)
    Q = eig.eigenvectors
    c = kernel.flow_coefficients(eig.eigenvalues + beta, eta0, t)
    return Q @ (c * (Q.T @ r))


def lin_params_closed_form(state, y, beta, eta0, t):
    """Linearized parameters after gradient flow for time ``t`` (``inf`` gives the ridge optimum)."""
    if beta < 0 or t < 0:
        raise ValueError("beta and t must be nonnegative")
    if t == 0:
        return state.theta0.copy()
    a = kernel_coefficients(state, y, beta, eta0, t)
    return state.theta0.replace(state.theta0.values + state.pullback(a))


def lin_params_gd_closed_form(state, y, beta, eta0, steps):
    """Geometric-sum form of ``steps`` descent steps on the linearized model."""
    r = state.residual(y)
    kernel.check_gd_rate(state.gram, beta, eta0, steps)
    eig = kernel.cached_eig(state.gram)
    Q = eig.eigenvectors
    a = Q @ (kernel.gd_coefficients(eig.eigenvalues + beta, eta0, int(steps)) * (Q.T @ r))
    return state.theta0.replace(state.theta0.values + state.pullback(a))


def lin_params_gd_iterate(state, y, beta, eta0, steps):
    """Run ``theta <- theta - eta0 (J_0^T g_lin(theta) + beta (theta - theta_0))`` for ``steps`` steps.

    Raises ``DivergentLearningRate`` once the gradient norm has grown for
    ``GROWTH_STEPS`` consecutive steps (it never grows inside the stable range).
    """
    steps = int(steps)
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    state.residual(y)
    delta = np.zeros(state.arch.n_params)
    prev = math.inf
    growth = 0
    for _ in range(steps):
        g = state.f0_train + state.push(delta) - y
        grad = state.pullback(g) + beta * delta
        norm = float(np.linalg.norm(grad))
        if not np.isfinite(norm):
            raise DivergentLearningRate("gradient overflowed")
        growth = growth + 1 if norm > prev else 0
        if growth >= GROWTH_STEPS:
            raise DivergentLearningRate(
                f"gradient norm grew for {GROWTH_STEPS} consecutive steps at eta0={eta0:.6g}")
        prev = norm
        delta -= eta0 * grad
    return state.theta0.replace(state.theta0.values + delta)


def param_frobenius_diff(theta_net, theta_lin, mask=None):
    """Euclidean distance between two parameter vectors over the entries in ``mask``."""
    if tuple(theta_net.layout) != tuple(theta_lin.layout):
        raise LayoutMismatch("parameter vectors have different layouts")
    d = theta_net.values - theta_lin.values
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    return float(np.linalg.norm(d))


def function_sup_diff(net_preds, lin_preds):
    """Largest absolute difference between two prediction vectors."""
    a = np.asarray(net_preds, dtype=np.float64).reshape(-1)
    b = np.asarray(lin_preds, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatch(f"prediction vectors of lengths {a.size} and {b.size}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))
