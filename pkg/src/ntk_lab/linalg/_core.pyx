# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for dense symmetric linear algebra.

Every routine uses a fixed loop order, so results are reproducible bit for bit
on a given machine.  The pure-Python twin lives in ``_fallback.py``.
"""
import numpy as np

from libc.math cimport fabs, sqrt


def cholesky(double[:, ::1] a):
    """Lower Cholesky factor of ``a``, or ``None`` when a pivot is not positive."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s, d
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] L = out
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return None
        d = sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    return out


def solve_lower(double[:, ::1] L, double[:, ::1] b):
    """Solve ``L x = b`` for lower-triangular ``L`` (columnwise forward substitution)."""
    cdef Py_ssize_t n = L.shape[0], m = b.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double s
    out = np.array(b, dtype=np.float64, copy=True)
    cdef double[:, ::1] x = out
    for c in range(m):
        for i in range(n):
            s = x[i, c]
            for j in range(i):
                s -= L[i, j] * x[j, c]
            x[i, c] = s / L[i, i]
    return out


def solve_lower_t(double[:, ::1] L, double[:, ::1] b):
    """Solve ``L^T x = b`` for lower-triangular ``L`` (back substitution)."""
    cdef Py_ssize_t n = L.shape[0], m = b.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double s
    out = np.array(b, dtype=np.float64, copy=True)
    cdef double[:, ::1] x = out
    for c in range(m):
        for i in range(n - 1, -1, -1):
            s = x[i, c]
            for j in range(i + 1, n):
                s -= L[j, i] * x[j, c]
            x[i, c] = s / L[i, i]
    return out


def jacobi_eigh(double[:, ::1] a_in, int max_sweeps, double tol):
    """Cyclic (row-by-row) Jacobi eigensolver.

    Returns ``(eigenvalues, eigenvectors, sweeps)`` with eigenvalues unsorted;
    ``sweeps`` is -1 when the budget ran out before the off-diagonal mass fell
    below ``tol`` times the Frobenius norm.
    """
    cdef Py_ssize_t n = a_in.shape[0]
    cdef Py_ssize_t p, q, k
    cdef int sweep
    cdef double off, fro, apq, app, aqq, theta, t, c, s, akp, akq, vkp, vkq
    A = np.array(a_in, dtype=np.float64, copy=True)
    V = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = A
    cdef double[:, ::1] v = V

    fro = 0.0
    for p in range(n):
        for q in range(n):
            fro += a[p, q] * a[p, q]

    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if off <= tol * tol * fro:
            return np.diag(A).copy(), V, sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if fabs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    if k == p or k == q:
                        continue
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[p, k] = a[k, p]
                    a[k, q] = s * akp + c * akq
                    a[q, k] = a[k, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return np.diag(A).copy(), V, -1
