"""Finite-width scalar-output MLPs in NTK and standard parametrization.

Parameters live in one flat float64 vector ordered layer by layer as
``W^1, b^1, W^2, b^2, ..., W^{L+1}, b^{L+1}`` with each weight matrix
``W^l`` of shape ``(n_l, n_{l-1})`` stored row-major.

Reverse mode is done by hand.  ``unit_deltas`` back-propagates a unit seed
from every example at once, which gives the per-example sensitivities
``delta^l_i = df(x_i)/dh^l``.  Everything else is built from those and the
forward activations: a weight block of the Jacobian row for ``x_i`` is
``s_l * delta^l_i (x) x^{l-1}_i`` where ``s_l`` is the layer's forward scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionMismatch, LayoutMismatch

_SQRT_2_OVER_PI = 2.0 / np.sqrt(np.pi)


def _erf_prime(h):
    return _SQRT_2_OVER_PI * np.exp(-h * h)


def _tanh_prime(h):
    t = np.tanh(h)
    return 1.0 - t * t


def _softplus(h):
    # log(1 + e^h) = max(h, 0) + log1p(e^-|h|); about 3x faster than logaddexp
    out = np.abs(h)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(h, 0.0)
    return out


def _relu(h):
    return np.maximum(h, 0.0)


def _relu_prime(h):
    return (h > 0).astype(np.float64)


def _identity(h):
    return h


def _ones(h):
    return np.ones_like(h)


# name -> (phi, phi'); relu breaks the Lipschitz-derivative assumption and is
# offered only for comparison
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "erf": (erf, _erf_prime),
    "tanh": (np.tanh, _tanh_prime),
    "softplus": (_softplus, expit),
    "relu": (_relu, _relu_prime),
    "identity": (_identity, _ones),
}

PARAMETRIZATIONS = ("ntk", "standard")


class Block(NamedTuple):
    layer: int  # 1-based, L+1 is the output layer
    kind: str  # "W" or "b"
    offset: int
    shape: tuple

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.size)


def _per_layer(value, n_layers, name):
    if np.ndim(value) == 0:
        out = (float(value),) * n_layers
    else:
        out = tuple(float(v) for v in value)
    if len(out) != n_layers:
        raise ValueError(f"{name} needs {n_layers} entries, got {len(out)}")
    if any(v < 0 for v in out):
        raise ValueError(f"{name} entries must be nonnegative")
    return out


@dataclass(frozen=True)
class MlpArchitecture:
    """Scalar-output MLP with ``L = len(hidden_widths)`` equal-width hidden layers.

    ``sigma_w`` / ``sigma_b`` are either scalars or one value per layer
    (``L + 1`` entries).  With ``train_first_layer_and_biases=False`` the
    first-layer weights and the hidden-layer biases are frozen; the output
    layer, bias included, is always trainable.
    """

    input_dim: int
    hidden_widths: tuple = ()
    activation: str = "erf"
    sigma_w: float | tuple = 1.0
    sigma_b: float | tuple = 0.1
    parametrization: str = "ntk"
    train_first_layer_and_biases: bool = False
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.output_dim != 1:
            raise ValueError("only scalar outputs are supported")
        hw = tuple(int(n) for n in self.hidden_widths)
        if any(n < 1 for n in hw):
            raise ValueError("hidden widths must be positive")
        if len(set(hw)) > 1:
            raise ValueError("hidden layers must share one width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        object.__setattr__(self, "hidden_widths", hw)
        n_layers = len(hw) + 1
        object.__setattr__(self, "sigma_w", _per_layer(self.sigma_w, n_layers, "sigma_w"))
        object.__setattr__(self, "sigma_b", _per_layer(self.sigma_b, n_layers, "sigma_b"))

    @property
    def depth(self):
        """Number of hidden layers L."""
        return len(self.hidden_widths)

    @property
    def width(self):
        return self.hidden_widths[0] if self.hidden_widths else 0

    @property
    def widths(self):
        """``(n_0, n_1, ..., n_{L+1})`` with ``n_0 = d`` and ``n_{L+1} = 1``."""
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    @cached_property
    def layout(self):
        blocks, off = [], 0
        w = self.widths
        for l in range(1, len(w)):
            for kind, shape in (("W", (w[l], w[l - 1])), ("b", (w[l],))):
                blocks.append(Block(l, kind, off, shape))
                off += int(np.prod(shape))
        return tuple(blocks)

    @property
    def n_params(self):
        w = self.widths
        return sum((w[l - 1] + 1) * w[l] for l in range(1, len(w)))

    def scale(self, layer):
        """Forward multiplier on ``W^l x^{l-1}``."""
        if self.parametrization == "ntk":
            return 1.0 / np.sqrt(self.widths[layer - 1])
        return 1.0

    def with_(self, **changes):
        from dataclasses import replace
        return replace(self, **changes)


def mlp(input_dim, width, depth, **kwargs):
    """Shorthand for an ``MlpArchitecture`` with ``depth`` hidden layers of ``width``."""
    return MlpArchitecture(input_dim, (width,) * depth, **kwargs)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(b.size for b in self.layout)
        if self.values.shape != (expected,):
            raise LayoutMismatch(f"vector of shape {self.values.shape} does not fit layout of {expected}")

    def block(self, layer, kind):
        """View into one block, shaped like the weight matrix or bias vector."""
        for b in self.layout:
            if b.layer == layer and b.kind == kind:
                return self.values[b.slice].reshape(b.shape)
        raise KeyError((layer, kind))

    @property
    def n_layers(self):
        return max(b.layer for b in self.layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def replace(self, values):
        return ParamVector(values, self.layout)


def check_layout(a, b):
    if tuple(a.layout) != tuple(b.layout):
        raise LayoutMismatch("parameter vectors have different layouts")


# ---------------------------------------------------------------------------
# training mask and the standard <-> NTK scaling

def trainable_blocks(arch):
    """Set of ``(layer, kind)`` pairs the optimizer moves."""
    out = set()
    last = arch.depth + 1
    for b in arch.layout:
        if arch.train_first_layer_and_biases or b.layer == last:
            out.add((b.layer, b.kind))
        elif b.kind == "W" and b.layer > 1:
            out.add((b.layer, b.kind))
    return out


def trainable_mask(arch):
    mask = np.zeros(arch.n_params, dtype=bool)
    keep = trainable_blocks(arch)
    for b in arch.layout:
        if (b.layer, b.kind) in keep:
            mask[b.slice] = True
    return mask


@dataclass(frozen=True)
class ScalingMatrixH:
    """Diagonal of H: ``1/n_{l-1}`` on weight blocks, ``1`` on biases."""

    diagonal: np.ndarray
    layout: tuple

    @classmethod
    def for_architecture(cls, arch):
        d = np.empty(arch.n_params)
        w = arch.widths
        for b in arch.layout:
            d[b.slice] = 1.0 / w[b.layer - 1] if b.kind == "W" else 1.0
        return cls(d, arch.layout)


def map_parametrization(params, H, direction):
    """Move parameters between parametrizations: ``theta_ntk = H^{-1/2} theta_std``."""
    if tuple(params.layout) != tuple(H.layout):
        raise LayoutMismatch("scaling matrix does not match the parameter layout")
    if direction == "std_to_ntk":
        return params.replace(params.values / np.sqrt(H.diagonal))
    if direction == "ntk_to_std":
        return params.replace(params.values * np.sqrt(H.diagonal))
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# initialization

def _philox_key(seed):
    return np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)


def _stream(key, layer, kind, index):
    counter = np.array([0, index, layer, 0 if kind == "W" else 1], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def init_params(arch, seed):
    """Draw initial parameters for ``arch``.

    Entry ``(l, kind, row, col)`` comes from a Philox stream keyed by the seed
    whose counter encodes ``(row, layer, kind)``, so a wider network shares
    its low-index entries with a narrower one drawn from the same seed.  The
    same standard normals back both parametrizations, hence
    ``init(standard) == H^{1/2} init(ntk)`` exactly.
    """
    key = _philox_key(seed)
    values = np.empty(arch.n_params)
    w = arch.widths
    for b in arch.layout:
        l = b.layer
        if b.kind == "W":
            n_out, n_in = b.shape
            z = np.empty(b.shape)
            for i in range(n_out):
                z[i] = _stream(key, l, "W", i).standard_normal(n_in)
            sd = arch.sigma_w[l - 1]
            if arch.parametrization == "standard":
                sd = sd / np.sqrt(w[l - 1])
            values[b.slice] = sd * z.ravel()
        else:
            values[b.slice] = arch.sigma_b[l - 1] * _stream(key, l, "b", 0).standard_normal(b.shape[0])
    return ParamVector(values, arch.layout)


# ---------------------------------------------------------------------------
# forward and reverse passes

@dataclass
class ForwardCache:
    """Pre-activations ``pre[l] = h^l`` (l = 1..L+1) and inputs ``post[l] = x^l`` (l = 0..L)."""

    pre: dict = field(default_factory=dict)
    post: dict = field(default_factory=dict)

    @property
    def output(self):
        return self.pre[max(self.pre)][:, 0]


def _as_inputs(arch, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(1, -1) if X.shape[0] == arch.input_dim else X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"inputs of shape {X.shape} do not match input_dim={arch.input_dim}")
    return X


def forward_cache(arch, params, X, fixed=None):
    """Run the network on the rows of ``X`` and keep every layer's values.

    ``fixed`` maps a layer index to a precomputed pre-activation, or to a
    ``(pre, post)`` pair, used instead of recomputing that layer (callers use
    this for frozen layers).
    """
    phi = ACTIVATIONS[arch.activation][0]
    X = _as_inputs(arch, X)
    fixed = fixed or {}
    cache = ForwardCache()
    x = X
    cache.post[0] = x
    last = arch.depth + 1
    for l in range(1, last + 1):
        post = None
        if l in fixed:
            h = fixed[l]
            if isinstance(h, tuple):
                h, post = h
        else:
            W = params.block(l, "W")
            h = arch.scale(l) * (x @ W.T) + params.block(l, "b")
        cache.pre[l] = h
        if l < last:
            x = phi(h) if post is None else post
            cache.post[l] = x
    return cache


def forward(arch, params, x):
    """Network output f(x, theta); a float for one input, a vector for a batch."""
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 0 or (X.ndim == 1 and X.shape[0] == arch.input_dim):
        return float(forward_cache(arch, params, X.reshape(1, -1)).output[0])
    return forward_cache(arch, params, X).output


def unit_deltas(arch, params, cache, stop_layer=1):
    """Per-example ``delta^l = df/dh^l`` for ``l = L+1`` down to ``stop_layer``."""
    dphi = ACTIVATIONS[arch.activation][1]
    last = arch.depth + 1
    n = cache.pre[last].shape[0]
    deltas = {last: np.ones((n, 1))}
    for l in range(last - 1, stop_layer - 1, -1):
        W = params.block(l + 1, "W")
        deltas[l] = dphi(cache.pre[l]) * (arch.scale(l + 1) * (deltas[l + 1] @ W))
    return deltas


def pullback(arch, cache, deltas, g, blocks=None):
    """``J(theta)^T g`` as a flat vector, restricted to ``blocks`` (default: all).

    Entries of blocks outside ``blocks`` are zero.
    """
    g = np.asarray(g, dtype=np.float64)
    out = np.zeros(arch.n_params)
    for b in arch.layout:
        if blocks is not None and (b.layer, b.kind) not in blocks:
            continue
        gd = deltas[b.layer] * g[:, None]
        if b.kind == "W":
            out[b.slice] = (arch.scale(b.layer) * (gd.T @ cache.post[b.layer - 1])).ravel()
        else:
            out[b.slice] = gd.sum(axis=0)
    return out


def push(arch, cache, deltas, v, blocks=None):
    """``J(theta) v`` for a flat parameter-space vector ``v``."""
    v = np.asarray(v, dtype=np.float64)
    n = cache.post[0].shape[0]
    out = np.zeros(n)
    for b in arch.layout:
        if blocks is not None and (b.layer, b.kind) not in blocks:
            continue
        D = deltas[b.layer]
        if b.kind == "W":
            V = v[b.slice].reshape(b.shape)
            out += arch.scale(b.layer) * np.einsum("ij,ij->i", D, cache.post[b.layer - 1] @ V.T)
        else:
            out += D @ v[b.slice]
    return out


def jacobian(arch, params, X):
    """Dense ``N x p`` Jacobian of the outputs with respect to every parameter.

    Frozen blocks are included; masking is up to the caller.
    """
    cache = forward_cache(arch, params, X)
    deltas = unit_deltas(arch, params, cache)
    n = cache.post[0].shape[0]
    J = np.empty((n, arch.n_params))
    for b in arch.layout:
        D = deltas[b.layer]
        if b.kind == "W":
            xin = cache.post[b.layer - 1]
            J[:, b.slice] = (arch.scale(b.layer) * D[:, :, None] * xin[:, None, :]).reshape(n, -1)
        else:
            J[:, b.slice] = D
    return J


def gram_from_caches(arch, cache_a, deltas_a, cache_b, deltas_b, blocks=None):
    """``J_a J_b^T`` assembled block by block without forming either Jacobian.

    A weight block contributes ``s_l^2 (D_a D_b^T) * (X_a X_b^T)`` (elementwise
    product), a bias block ``D_a D_b^T``.  Blocks are summed in layout order.
    """
    na = cache_a.post[0].shape[0]
    nb = cache_b.post[0].shape[0]
    K = np.zeros((na, nb))
    for b in arch.layout:
        if blocks is not None and (b.layer, b.kind) not in blocks:
            continue
        DD = deltas_a[b.layer] @ deltas_b[b.layer].T
        if b.kind == "W":
            XX = cache_a.post[b.layer - 1] @ cache_b.post[b.layer - 1].T
            K += arch.scale(b.layer) ** 2 * DD * XX
        else:
            K += DD
    return K


def block_traces(arch, cache, deltas):
    """``{(layer, kind): tr(J_block J_block^T)}`` on the cached points."""
    out = {}
    for b in arch.layout:
        dd = np.einsum("ij,ij->i", deltas[b.layer], deltas[b.layer])
        if b.kind == "W":
            xx = np.einsum("ij,ij->i", cache.post[b.layer - 1], cache.post[b.layer - 1])
            out[(b.layer, b.kind)] = float(arch.scale(b.layer) ** 2 * np.sum(dd * xx))
        else:
            out[(b.layer, b.kind)] = float(np.sum(dd))
    return out


def jacobian_drift(arch, cache_t, deltas_t, cache_0, deltas_0, blocks=None):
    """``||J(theta_t) - J(theta_0)||_F`` over the cached points, trainable blocks only.

    Per example and weight block the difference is ``a u^T + b v^T`` with
    ``a = d_t - d_0``, ``u = x_t``, ``b = d_0``, ``v = x_t - x_0``; its squared
    norm expands without cancelling the (large) undisturbed parts.
    """
    total = 0.0
    for b in arch.layout:
        if blocks is not None and (b.layer, b.kind) not in blocks:
            continue
        d0 = deltas_0[b.layer]
        a = deltas_t[b.layer] - d0
        if b.kind == "W":
            xt = cache_t.post[b.layer - 1]
            v = xt - cache_0.post[b.layer - 1]
            aa = np.einsum("ij,ij->i", a, a)
            bb = np.einsum("ij,ij->i", d0, d0)
            ab = np.einsum("ij,ij->i", a, d0)
            uu = np.einsum("ij,ij->i", xt, xt)
            vv = np.einsum("ij,ij->i", v, v)
            uv = np.einsum("ij,ij->i", xt, v)
            total += arch.scale(b.layer) ** 2 * float(np.sum(aa * uu + bb * vv + 2.0 * ab * uv))
        else:
            total += float(np.sum(a * a))
    return float(np.sqrt(max(total, 0.0)))


# ---------------------------------------------------------------------------
# prior means, shifted networks, zeroed output layer

class PriorMean:
    """A deterministic prior-mean function m(x).

    Build one with ``zero()``, ``constant(c)``, ``tabulated(fn)`` or
    ``pretrained(predictor)``; call it on an ``N x d`` input matrix.
    """

    def __init__(self, kind, fn, description=""):
        self.kind = kind
        self._fn = fn
        self.description = description

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        out = np.asarray(self._fn(X), dtype=np.float64)
        return np.broadcast_to(out, (X.shape[0],)).copy() if out.ndim == 0 else out.reshape(X.shape[0])

    def __repr__(self):
        return f"PriorMean({self.kind}{', ' + self.description if self.description else ''})"

    @classmethod
    def zero(cls):
        return cls("zero", lambda X: np.zeros(X.shape[0]))

    @classmethod
    def constant(cls, c):
        c = float(c)
        return cls("constant", lambda X: np.full(X.shape[0], c), f"c={c!r}")

    @classmethod
    def tabulated(cls, fn):
        return cls("tabulated", fn)

    @classmethod
    def pretrained(cls, predictor):
        """Use an already-trained (shifted) network's predictions as the prior."""
        return cls("pretrained_network", predictor)


class ShiftedPredictor:
    """``x -> f(x, theta) - f(x, theta_0) + m(x)`` for fixed parameters."""

    def __init__(self, arch, params, params0, prior):
        check_layout(params, params0)
        self.arch = arch
        self.params = params
        self.params0 = params0
        self.prior = prior

    def __call__(self, X):
        X = _as_inputs(self.arch, X)
        return (forward_cache(self.arch, self.params, X).output
                - forward_cache(self.arch, self.params0, X).output
                + self.prior(X))


def shifted_forward(arch, params, params0, m, x):
    """Shifted prediction ``f(x, theta) - f(x, theta_0) + m(x)``."""
    check_layout(params, params0)
    X = _as_inputs(arch, x)
    out = ShiftedPredictor(arch, params, params0, m)(X)
    x = np.asarray(x)
    if x.ndim == 0 or (x.ndim == 1 and x.shape[0] == arch.input_dim):
        return float(out[0])
    return out


def zero_last_layer(params):
    """Copy of ``params`` with the output layer's weights and bias set to zero."""
    out = params.copy()
    last = out.n_layers
    out.block(last, "W")[...] = 0.0
    out.block(last, "b")[...] = 0.0
    return out
