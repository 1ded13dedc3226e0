"""Dense symmetric linear algebra: Cholesky solves, Jacobi eigendecomposition,
and the action of ``exp(-tA)`` on a block of vectors.

The hot loops run in a compiled Cython extension when it is importable; set
``NTK_LAB_PURE_PYTHON=1`` to force the numpy fallback.  ``BACKEND`` names the
one in use.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, NoConvergence, NotPositiveDefinite
from . import _fallback

if os.environ.get("NTK_LAB_PURE_PYTHON", "") in ("1", "true", "yes"):
    _core = None
else:
    try:
        from . import _core
    except ImportError:  # extension not built
        _core = None

BACKEND = "cython" if _core is not None else "python"

MAX_SWEEPS = 100
JACOBI_TOL = 1e-15
SYMMETRY_TOL = 1e-12


def backends():
    """Names of the kernel backends available in this installation."""
    return ("cython", "python") if _core is not None else ("python",)


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _core is None:
            raise RuntimeError("compiled backend is not available")
        return _core
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown backend {backend!r}")


@dataclass(frozen=True)
class EigDecomp:
    """Eigenvalues in ascending order and orthonormal eigenvectors (as columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self):
        return self.eigenvalues.shape[0]

    def reconstruct(self):
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


def as_sym_matrix(A, tol=SYMMETRY_TOL):
    """Validate and return ``A`` as a C-contiguous float64 symmetric matrix.

    The symmetry tolerance is relative to ``max(1, max|A|)``.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return A


def cholesky_solve(A, B, jitter=None, backend=None):
    """Solve ``(A + jitter I) X = B`` for symmetric positive-definite ``A``.

    With ``jitter=None`` the plain factorization is tried first and, only if it
    fails, retried once with ``1e-10 * trace(A) / dim`` on the diagonal.
    ``B`` may be a vector or a ``dim x k`` matrix; the result has its shape.
    """
    impl = _impl(backend)
    A = as_sym_matrix(A)
    n = A.shape[0]
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    if B.ndim not in (1, 2) or B.shape[0] != n:
        raise DimensionMismatch(f"right-hand side has shape {B.shape}, matrix has {n} rows")
    B2 = np.ascontiguousarray(B.reshape(n, 1) if vector else B)

    if jitter is None:
        L = impl.cholesky(A)
        if L is None:
            jitter = 1e-10 * float(np.trace(A)) / n
            if not jitter > 0.0:
                jitter = 1e-10
            L = impl.cholesky(A + jitter * np.eye(n))
    else:
        if jitter < 0:
            raise ValueError("jitter must be nonnegative")
        L = impl.cholesky(A + jitter * np.eye(n)) if jitter else impl.cholesky(A)
    if L is None:
        raise NotPositiveDefinite(
            "matrix is not positive definite even with jitter; "
            "a singular kernel needs beta > 0")
    X = impl.solve_lower_t(L, impl.solve_lower(L, B2))
    return X.ravel() if vector else X


def _fix_signs(Q):
    # largest-magnitude entry of each eigenvector made positive
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def sym_eig(A, backend=None, max_sweeps=MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations."""
    impl = _impl(backend)
    A = as_sym_matrix(A)
    # exact symmetry keeps the two triangles of the rotated matrix in lockstep
    A = np.ascontiguousarray(0.5 * (A + A.T))
    w, Q, sweeps = impl.jacobi_eigh(A, int(max_sweeps), JACOBI_TOL)
    if sweeps < 0:
        raise NoConvergence(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    order = np.argsort(w, kind="stable")
    return EigDecomp(np.ascontiguousarray(w[order]), _fix_signs(np.ascontiguousarray(Q[:, order])))


def exp_action(A, t, V, backend=None):
    """Return ``exp(-t A) V`` for symmetric ``A`` (or a precomputed ``EigDecomp``)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    eig = A if isinstance(A, EigDecomp) else sym_eig(A, backend=backend)
    V = np.asarray(V, dtype=np.float64)
    Q = eig.eigenvectors
    if V.shape[0] != Q.shape[0]:
        raise DimensionMismatch("V has the wrong number of rows")
    coeff = Q.T @ V
    decay = np.exp(-t * eig.eigenvalues)
    coeff = coeff * (decay if V.ndim == 1 else decay[:, None])
    return Q @ coeff


def max_eigenvalue(A, tol=1e-12, max_iter=20000):
    """Largest eigenvalue of a symmetric positive-semidefinite matrix by power iteration.

    Cheaper than a full ``sym_eig`` for large Gram matrices; the Rayleigh
    quotient converges at twice the rate of the iterate itself.
    """
    A = as_sym_matrix(A)
    n = A.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    # a deterministic, non-symmetric start avoids landing orthogonal to the top vector
    v = v + 1e-3 * np.cos(np.arange(n))
    v /= np.linalg.norm(v)
    lam = float(v @ A @ v)
    for _ in range(max_iter):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ A @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    raise NoConvergence("power iteration did not converge")


__all__ = [
    "BACKEND",
    "EigDecomp",
    "as_sym_matrix",
    "backends",
    "cholesky_solve",
    "exp_action",
    "max_eigenvalue",
    "sym_eig",
]
