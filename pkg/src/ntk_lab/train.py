"""Regularized full-batch training of the finite network.

The objective is ``L(theta) = 1/2 ||f(X, theta) - y||^2 + 1/2 beta ||theta - theta_0||^2``
over the trainable blocks, minimized by gradient descent or by fourth-order
Runge-Kutta integration of the gradient flow.  Iterates are stored as the
displacement ``z`` from ``theta_0``.

Three interchangeable objectives implement the same protocol:

* ``_DenseObjective``: ``z`` is the flat ``theta - theta_0``.  An optional
  diagonal preconditioner ``P`` and penalty weights ``w`` turn it into the
  standard-parametrization problem with layer-dependent learning rates.
* ``_FactoredObjective``: when the first layer is frozen, the second-layer
  weights can only move within the row space of the (fixed) first-layer
  activations ``X1``, so ``W2 - W2_0 = D^T X1`` with ``D`` of shape ``N x n``.
  Each step then costs ``O(N^2 n)`` instead of ``O(N n^2)``.
* ``_LinearizedObjective``: the model linearized at ``theta_0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel, net
from .errors import DimensionMismatch, Diverged
from .lin import LinearizedState

DIVERGENCE_FACTOR = 1e6


@dataclass
class TrainConfig:
    beta: float = 0.5
    eta0: float | str = "auto"
    max_steps: int = 200_000
    grad_tol: float = 1e-8
    flow_step: float = 0.1
    flow_time: float | None = None
    record_every: int = 10
    probe_points: np.ndarray | None = None
    track_jacobian_drift: bool = False
    track_linearized: bool = False
    record_params: bool = False
    linearized: bool = False
    factored: bool | None = None  # None: pick automatically

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.flow_step > 0:
            raise ValueError("flow_step must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.eta0 != "auto" and not float(self.eta0) > 0:
            raise ValueError("eta0 must be positive or 'auto'")


@dataclass
class TrainTrace:
    """Diagnostics recorded every ``record_every`` steps (and at the last step).

    ``steps`` holds step indices for descent and times for the flow.  Series
    that were not requested hold NaN.
    """

    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    dist_from_init: list = field(default_factory=list)
    jacobian_drift: list = field(default_factory=list)
    lin_gap: list = field(default_factory=list)
    probe_predictions: list = field(default_factory=list)
    params: list = field(default_factory=list)
    eta0: float = float("nan")
    converged: bool = False
    n_steps: int = 0
    objective: str = ""

    def as_array(self, name):
        return np.asarray(getattr(self, name), dtype=np.float64)

    def __len__(self):
        return len(self.steps)


class _Eval:
    """One objective evaluation; the gradient norm is computed on first use."""

    def __init__(self, f, loss, direction, grad_norm, cache=None, deltas=None):
        self.f = f
        self.loss = loss
        self.direction = direction  # preconditioned gradient, in z coordinates
        self._grad_norm = grad_norm
        self.cache = cache
        self.deltas = deltas

    @property
    def grad_norm(self):
        if callable(self._grad_norm):
            self._grad_norm = float(self._grad_norm())
        return self._grad_norm


def _training_xy(arch, data):
    if isinstance(data, tuple):
        X, y = data
    else:
        X, y = data.x, data.y
    X = net._as_inputs(arch, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return X, y


def _first_layer_frozen(arch, blocks):
    return arch.depth >= 1 and (1, "W") not in blocks and (1, "b") not in blocks


class _BlockView:
    """Duck-typed stand-in for ``ParamVector`` that serves blocks from a dict."""

    def __init__(self, blocks):
        self._blocks = blocks

    def block(self, layer, kind):
        return self._blocks[(layer, kind)]


# ---------------------------------------------------------------------------
# objectives

class _DenseObjective:
    name = "dense"

    def __init__(self, arch, params0, X, y, beta, precond=None, penalty=None):
        self.arch, self.params0, self.X, self.y, self.beta = arch, params0, X, y, beta
        self.blocks = net.trainable_blocks(arch)
        self.mask = net.trainable_mask(arch)
        self.precond = precond
        self.penalty = penalty
        self.fixed = {}
        self.stop = 1
        if _first_layer_frozen(arch, self.blocks):
            c = net.forward_cache(arch, params0, X)
            self.fixed = {1: (c.pre[1], c.post[1])}
            self.stop = 2
        self.cache0 = net.forward_cache(arch, params0, X, self.fixed)
        self.deltas0 = net.unit_deltas(arch, params0, self.cache0, self.stop)
        self.size = arch.n_params

    def zero(self):
        return np.zeros(self.size)

    def params(self, z):
        return self.params0.replace(self.params0.values + z)

    def _penalty_norm2(self, z):
        return float(z @ z) if self.penalty is None else float(z @ (self.penalty * z))

    def evaluate(self, z):
        p = self.params(z)
        cache = net.forward_cache(self.arch, p, self.X, self.fixed)
        deltas = net.unit_deltas(self.arch, p, cache, self.stop)
        f = cache.output
        g = f - self.y
        grad = net.pullback(self.arch, cache, deltas, g, self.blocks)
        grad += self.beta * (z if self.penalty is None else self.penalty * z)
        loss = 0.5 * float(g @ g) + 0.5 * self.beta * self._penalty_norm2(z)
        if self.precond is None:
            direction = grad
            return _Eval(f, loss, direction, lambda: np.linalg.norm(grad), cache, deltas)
        direction = self.precond * grad
        return _Eval(f, loss, direction, lambda: np.sqrt(grad @ direction), cache, deltas)

    def norm(self, z):
        return float(np.linalg.norm(z))

    def predict(self, z, X):
        return net.forward_cache(self.arch, self.params(z), X).output

    def drift(self, ev):
        return net.jacobian_drift(self.arch, ev.cache, ev.deltas, self.cache0, self.deltas0, self.blocks)

    def gram0(self):
        """Kernel governing the preconditioned dynamics at ``theta_0``: ``J P J^T``."""
        if self.precond is None:
            return net.gram_from_caches(self.arch, self.cache0, self.deltas0,
                                        self.cache0, self.deltas0, self.blocks)
        K = np.zeros((self.X.shape[0],) * 2)
        for b in self.arch.layout:
            if (b.layer, b.kind) not in self.blocks:
                continue
            scale = float(self.precond[b.offset])
            K += scale * net.gram_from_caches(self.arch, self.cache0, self.deltas0,
                                              self.cache0, self.deltas0, {(b.layer, b.kind)})
        return K

    def penalty_curvature(self):
        if self.precond is None:
            return 1.0
        w = np.ones(self.size) if self.penalty is None else self.penalty
        return float(np.max((self.precond * w)[self.mask]))

    def pullback0(self, a):
        out = net.pullback(self.arch, self.cache0, self.deltas0, a, self.blocks)
        return out if self.precond is None else self.precond * out


class _FactoredObjective:
    """NTK parametrization, frozen first layer and hidden biases, depth >= 2.

    The leading ``N * n`` entries of ``z`` hold ``D = C^T`` (row-major), so
    ``W2 - W2_0 = D^T X1`` and the second-layer pre-activation shift is
    ``s2 G D`` with ``G = X1 X1^T``.
    """

    name = "factored"

    def __init__(self, arch, params0, X, y, beta):
        if arch.parametrization != "ntk" or arch.depth < 2:
            raise ValueError("the factored path needs an NTK network with at least two hidden layers")
        blocks = net.trainable_blocks(arch)
        if not _first_layer_frozen(arch, blocks):
            raise ValueError("the factored path needs a frozen first layer")
        self.arch, self.params0, self.X, self.y, self.beta = arch, params0, X, y, beta
        self.blocks = blocks
        c = net.forward_cache(arch, params0, X)
        self.h1 = c.pre[1]
        self.X1 = c.post[1]
        self.G = self.X1 @ self.X1.T
        self.h2_0 = c.pre[2]
        self.s2 = arch.scale(2)
        self.sG = self.s2 * self.G
        self.cache0 = net.forward_cache(arch, params0, X, {1: (self.h1, self.X1), 2: self.h2_0})
        self.deltas0 = net.unit_deltas(arch, params0, self.cache0, 2)

        N, n = X.shape[0], arch.width
        self.d_shape = (N, n)
        self.d_size = N * n
        self.dense = []  # (layer, kind, offset in z, shape) for every other trainable block
        off = self.d_size
        for b in arch.layout:
            if (b.layer, b.kind) in blocks and (b.layer, b.kind) != (2, "W"):
                self.dense.append((b.layer, b.kind, off, b.shape))
                off += b.size
        self.size = off

    def zero(self):
        return np.zeros(self.size)

    def _D(self, z):
        return z[:self.d_size].reshape(self.d_shape)

    def _view(self, z):
        blocks = {(b.layer, b.kind): self.params0.block(b.layer, b.kind) for b in self.arch.layout}
        for layer, kind, off, shape in self.dense:
            size = int(np.prod(shape))
            blocks[(layer, kind)] = self.params0.block(layer, kind) + z[off:off + size].reshape(shape)
        return _BlockView(blocks)

    def _cache(self, z):
        sGD = self.sG @ self._D(z)
        view = self._view(z)
        cache = net.forward_cache(self.arch, view, self.X, {1: (self.h1, self.X1), 2: sGD + self.h2_0})
        return view, cache, sGD

    def _pull(self, cache, deltas, g):
        """``J^T g`` in z coordinates (no penalty term)."""
        out = np.empty(self.size)
        Mt = out[:self.d_size].reshape(self.d_shape)
        np.multiply(deltas[2], g[:, None], out=Mt)
        Mt *= self.s2
        for layer, kind, off, shape in self.dense:
            gd = deltas[layer] * g[:, None]
            if kind == "W":
                val = self.arch.scale(layer) * (gd.T @ cache.post[layer - 1])
            else:
                val = gd.sum(axis=0)
            out[off:off + val.size] = val.ravel()
        return out

    def evaluate(self, z):
        view, cache, sGD = self._cache(z)
        deltas = net.unit_deltas(self.arch, view, cache, 2)
        f = cache.output
        g = f - self.y
        direction = self._pull(cache, deltas, g)
        direction += self.beta * z
        D = self._D(z)
        zr = z[self.d_size:]
        # ||D^T X1||^2 = sum(D * G D), reusing G D from the forward pass
        dist2 = max(float(np.vdot(D, sGD)) / self.s2 + float(zr @ zr), 0.0)
        loss = 0.5 * float(g @ g) + 0.5 * self.beta * dist2
        return _Eval(f, loss, direction, lambda: self.norm(direction), cache, deltas)

    def norm(self, z):
        D = self._D(z)
        zr = z[self.d_size:]
        return math.sqrt(max(float(np.vdot(D, self.G @ D)) + float(zr @ zr), 0.0))

    def params(self, z):
        out = self.params0.copy()
        out.block(2, "W")[...] += self._D(z).T @ self.X1
        for layer, kind, off, shape in self.dense:
            out.block(layer, kind)[...] += z[off:off + int(np.prod(shape))].reshape(shape)
        return out

    def predict(self, z, X):
        X = net._as_inputs(self.arch, X)
        c = net.forward_cache(self.arch, self.params0, X)
        h2 = c.pre[2] + self.s2 * ((c.post[1] @ self.X1.T) @ self._D(z))
        return net.forward_cache(self.arch, self._view(z), X, {1: (c.pre[1], c.post[1]), 2: h2}).output

    def drift(self, ev):
        return net.jacobian_drift(self.arch, ev.cache, ev.deltas, self.cache0, self.deltas0, self.blocks)

    def gram0(self):
        return net.gram_from_caches(self.arch, self.cache0, self.deltas0,
                                    self.cache0, self.deltas0, self.blocks)

    def penalty_curvature(self):
        return 1.0

    def pullback0(self, a):
        return self._pull(self.cache0, self.deltas0, np.asarray(a, dtype=np.float64))


class _LinearizedObjective:
    name = "linearized"

    def __init__(self, arch, params0, X, y, beta):
        self.arch, self.params0, self.X, self.y, self.beta = arch, params0, X, y, beta
        self.state = LinearizedState(arch, params0, X)
        self.blocks = self.state.blocks
        self.size = arch.n_params

    def zero(self):
        return np.zeros(self.size)

    def params(self, z):
        return self.params0.replace(self.params0.values + z)

    def evaluate(self, z):
        f = self.state.f0_train + self.state.push(z)
        g = f - self.y
        grad = self.state.pullback(g) + self.beta * z
        loss = 0.5 * float(g @ g) + 0.5 * self.beta * float(z @ z)
        return _Eval(f, loss, grad, float(np.linalg.norm(grad)))

    def norm(self, z):
        return float(np.linalg.norm(z))

    def predict(self, z, X):
        return self.state.predict(self.params(z), X)

    def drift(self, ev):
        return 0.0

    def gram0(self):
        return self.state.gram.values

    def penalty_curvature(self):
        return 1.0

    def pullback0(self, a):
        return self.state.pullback(a)


def _standard_scalings(arch, uniform_lr=False):
    H = net.ScalingMatrixH.for_architecture(arch).diagonal
    if uniform_lr:
        return np.full(arch.n_params, 1.0 / arch.width if arch.width else 1.0), 1.0 / H
    return H, 1.0 / H


def _objective(arch, params0, X, y, config):
    if config.linearized:
        return _LinearizedObjective(arch, params0, X, y, config.beta)
    if arch.parametrization == "standard":
        P, w = _standard_scalings(arch)
        return _DenseObjective(arch, params0, X, y, config.beta, P, w)
    factored = config.factored
    if factored is None:
        factored = (arch.depth >= 2 and _first_layer_frozen(arch, net.trainable_blocks(arch))
                    and arch.width > X.shape[0])
    if factored:
        return _FactoredObjective(arch, params0, X, y, config.beta)
    return _DenseObjective(arch, params0, X, y, config.beta)


def _resolve_eta(obj, config):
    if config.eta0 != "auto":
        return float(config.eta0)
    lam = kernel.max_eig(obj.gram0())
    return 1.0 / (lam + config.beta * obj.penalty_curvature())


# ---------------------------------------------------------------------------
# the shared loop

class _Recorder:
    def __init__(self, obj, config, eta, y):
        self.obj, self.config, self.eta = obj, config, eta
        self.trace = TrainTrace(eta0=eta, objective=obj.name)
        self.probe = None
        if config.probe_points is not None:
            self.probe = net._as_inputs(obj.arch, config.probe_points)
        self.a = None
        if config.track_linearized:
            self.K = obj.gram0()
            self.r = y - obj.cache0.output if hasattr(obj, "cache0") else y - obj.state.f0_train
            self.a = np.zeros_like(y)

    def advance_linearized(self, h=None):
        """One step of the linearized dynamics in kernel coordinates."""
        if self.a is None:
            return
        beta = self.config.beta
        if h is None:
            self.a = self.a - self.eta * (self.K @ self.a + beta * self.a - self.r)
            return

        def rhs(a):
            return -self.eta * (self.K @ a + beta * a - self.r)
        k1 = rhs(self.a)
        k2 = rhs(self.a + 0.5 * h * k1)
        k3 = rhs(self.a + 0.5 * h * k2)
        k4 = rhs(self.a + h * k3)
        self.a = self.a + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def record(self, index, z, ev):
        t, c = self.trace, self.config
        if t.steps and t.steps[-1] == index:
            return
        t.steps.append(index)
        t.loss.append(ev.loss)
        t.grad_norm.append(ev.grad_norm)
        t.dist_from_init.append(self.obj.norm(z))
        t.jacobian_drift.append(self.obj.drift(ev) if c.track_jacobian_drift else math.nan)
        if self.a is not None:
            t.lin_gap.append(self.obj.norm(z - self.obj.pullback0(self.a)))
        else:
            t.lin_gap.append(math.nan)
        if self.probe is not None:
            t.probe_predictions.append(self.obj.predict(z, self.probe))
        if c.record_params:
            t.params.append(self.obj.params(z).values.copy())


def _check(ev, loss0, where):
    if not np.isfinite(ev.loss) or ev.loss > DIVERGENCE_FACTOR * max(loss0, 1e-300):
        raise Diverged(f"loss {ev.loss:.6g} exceeded {DIVERGENCE_FACTOR:g} x the initial {loss0:.6g} at {where}")


def _descend(obj, config, y):
    eta = _resolve_eta(obj, config)
    rec = _Recorder(obj, config, eta, y)
    z = obj.zero()
    ev = obj.evaluate(z)
    loss0 = ev.loss
    step = 0
    while True:
        # the gradient norm is only looked at on recorded steps
        at_record = step % config.record_every == 0 or step == config.max_steps
        done = at_record and ev.grad_norm <= config.grad_tol
        if at_record:
            rec.record(step, z, ev)
        if done or step == config.max_steps:
            break
        z -= eta * ev.direction
        rec.advance_linearized()
        ev = obj.evaluate(z)
        step += 1
        _check(ev, loss0, f"step {step}")
    rec.trace.converged = bool(rec.trace.grad_norm[-1] <= config.grad_tol)
    rec.trace.n_steps = step
    return obj.params(z), rec.trace, z


def _flow(obj, config, y):
    eta = _resolve_eta(obj, config)
    rec = _Recorder(obj, config, eta, y)
    z = obj.zero()
    ev = obj.evaluate(z)
    loss0 = ev.loss
    if config.flow_time is not None:
        if config.flow_time < 0:
            raise ValueError("flow_time must be nonnegative")
        n = int(math.ceil(config.flow_time / config.flow_step - 1e-12))
        h = config.flow_time / n if n else 0.0
    else:
        n, h = config.max_steps, config.flow_step

    def rhs(zz):
        return -eta * obj.evaluate(zz).direction

    step = 0
    while True:
        at_record = step % config.record_every == 0 or step == n
        done = at_record and config.flow_time is None and ev.grad_norm <= config.grad_tol
        if at_record:
            rec.record(step * h, z, ev)
        if done or step == n:
            break
        k1 = -eta * ev.direction
        k2 = rhs(z + 0.5 * h * k1)
        k3 = rhs(z + 0.5 * h * k2)
        k4 = rhs(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        rec.advance_linearized(h)
        ev = obj.evaluate(z)
        step += 1
        _check(ev, loss0, f"t={step * h:.6g}")
    rec.trace.converged = bool(rec.trace.grad_norm[-1] <= config.grad_tol)
    rec.trace.n_steps = step
    return obj.params(z), rec.trace, z


# ---------------------------------------------------------------------------
# public API

def reg_loss(arch, params, params0, data, beta):
    """``1/2 ||f(X, theta) - y||^2 + 1/2 beta ||theta - theta_0||^2`` over trainable entries."""
    net.check_layout(params, params0)
    X, y = _training_xy(arch, data)
    g = net.forward_cache(arch, params, X).output - y
    d = (params.values - params0.values)[net.trainable_mask(arch)]
    return 0.5 * float(g @ g) + 0.5 * beta * float(d @ d)


def reg_grad(arch, params, params0, data, beta):
    """``J(theta)^T g + beta (theta - theta_0)``, zero on frozen blocks."""
    net.check_layout(params, params0)
    X, y = _training_xy(arch, data)
    cache = net.forward_cache(arch, params, X)
    deltas = net.unit_deltas(arch, params, cache)
    g = cache.output - y
    mask = net.trainable_mask(arch)
    out = net.pullback(arch, cache, deltas, g, net.trainable_blocks(arch))
    out[mask] += beta * (params.values - params0.values)[mask]
    return out


def gd_train(arch, params0, data, config=None):
    """Full-batch gradient descent ``theta <- theta - eta0 grad L`` until
    ``grad_norm <= grad_tol`` or ``max_steps``.  Returns ``(params, trace)``."""
    config = config or TrainConfig()
    X, y = _training_xy(arch, data)
    params, trace, _ = _descend(_objective(arch, params0, X, y, config), config, y)
    return params, trace


def flow_integrate(arch, params0, data, config=None):
    """Classical RK4 on ``d theta / dt = -eta0 grad L`` with a fixed step.

    Integrates to ``config.flow_time`` when set, otherwise until the gradient
    tolerance is met.  Trace indices are times.
    """
    config = config or TrainConfig()
    X, y = _training_xy(arch, data)
    params, trace, _ = _flow(_objective(arch, params0, X, y, config), config, y)
    return params, trace


def std_train(arch, params0, data, config=None, uniform_lr=False, method="gd"):
    """Train a standard-parametrization network.

    By default the step is ``eta0 H grad L`` with penalty
    ``1/2 beta (theta - theta_0)^T H^{-1} (theta - theta_0)``, which tracks the
    NTK-parametrized run through ``theta_std = H^{1/2} theta_ntk``.  The
    recorded gradient norm is ``||H^{1/2} grad L||``, the NTK-side value.
    ``uniform_lr`` replaces ``H`` by the single rate ``1/n`` for every block.
    """
    if arch.parametrization != "standard":
        raise ValueError("std_train needs an architecture in standard parametrization")
    config = config or TrainConfig()
    X, y = _training_xy(arch, data)
    P, w = _standard_scalings(arch, uniform_lr)
    obj = _DenseObjective(arch, params0, X, y, config.beta, P, w)
    run = _descend if method == "gd" else _flow
    params, trace, _ = run(obj, config, y)
    return params, trace


def first_layer_share(arch, params, X, uniform_lr=True):
    """Fraction of the effective kernel's trace contributed by first-layer weights.

    For a standard-parametrization network trained with one learning rate
    for every block the effective kernel is ``J_std J_std^T``; with
    ``uniform_lr=False`` it is ``J_std H J_std^T`` (the NTK).  Biases count
    only when they are trained.
    """
    X = net._as_inputs(arch, X)
    cache = net.forward_cache(arch, params, X)
    deltas = net.unit_deltas(arch, params, cache)
    traces = net.block_traces(arch, cache, deltas)
    H = net.ScalingMatrixH.for_architecture(arch).diagonal
    keep = net.trainable_blocks(arch)
    total = first = 0.0
    for b in arch.layout:
        if (b.layer, b.kind) not in keep:
            continue
        v = traces[(b.layer, b.kind)] * (1.0 if uniform_lr else H[b.offset])
        total += v
        if (b.layer, b.kind) == (1, "W"):
            first += v
    return first / total if total else 0.0


class ShiftedTrainResult(net.ShiftedPredictor):
    """A ``ShiftedPredictor`` that also carries the training trace."""

    def __init__(self, arch, params, params0, prior, trace):
        super().__init__(arch, params, params0, prior)
        self.trace = trace


def shifted_train(arch, params0, data, prior, config=None, method="gd"):
    """Train on labels ``y + f(x, theta_0) - m(x)`` and return the shifted predictor
    ``x -> f(x, theta) - f(x, theta_0) + m(x)`` together with the trace."""
    config = config or TrainConfig()
    X, y = _training_xy(arch, data)
    if len(y) == 0:
        trace = TrainTrace(converged=True)
        return ShiftedTrainResult(arch, params0.copy(), params0, prior, trace), trace
    shifted_y = y + net.forward_cache(arch, params0, X).output - prior(X)
    trainer = gd_train if method == "gd" else flow_integrate
    params, trace = trainer(arch, params0, (X, shifted_y), config)
    return ShiftedTrainResult(arch, params, params0, prior, trace), trace
