"""Pure-Python (numpy-vectorised) twins of the compiled kernels in ``_core.pyx``.

Same contracts, same return conventions.  The eigensolver uses the round-robin
("parallel") Jacobi ordering so that each round of n/2 disjoint rotations is a
handful of numpy calls instead of n/2 Python-level rotations.
"""
import numpy as np


def cholesky(a):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        row = L[j, :j]
        s = a[j, j] - row @ row
        if not s > 0.0:
            return None
        d = np.sqrt(s)
        L[j, j] = d
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / d
    return L


def solve_lower(L, b):
    x = np.array(b, dtype=np.float64, copy=True)
    for i in range(L.shape[0]):
        x[i] = (x[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def solve_lower_t(L, b):
    x = np.array(b, dtype=np.float64, copy=True)
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
    return x


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair exactly once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs], dtype=np.intp),
                       np.array([q for _, q in pairs], dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a_in, max_sweeps, tol):
    a = np.array(a_in, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    fro = float(np.sum(a * a))
    iu = np.triu_indices(n, 1)
    rounds = _round_robin(n)
    for sweep in range(max_sweeps + 1):
        off = float(np.sum(a[iu] ** 2))
        if off <= tol * tol * fro:
            return np.diag(a).copy(), v, sweep
        if sweep == max_sweeps:
            break
        for P, Q in rounds:
            if P.size == 0:
                continue
            apq = a[P, Q]
            active = apq != 0.0
            if not active.any():
                continue
            P, Q, apq = P[active], Q[active], apq[active]
            app = a[P, P]
            aqq = a[Q, Q]
            theta = (aqq - app) / (2.0 * apq)
            with np.errstate(over="ignore"):
                big = np.abs(theta) > 1e150
                t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                             np.sign(theta + (theta == 0)) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            colp = a[:, P].copy()
            colq = a[:, Q]
            a[:, P] = c * colp - s * colq
            a[:, Q] = s * colp + c * colq
            rowp = a[P, :].copy()
            rowq = a[Q, :]
            a[P, :] = c[:, None] * rowp - s[:, None] * rowq
            a[Q, :] = s[:, None] * rowp + c[:, None] * rowq
            a[P, P] = app - t * apq
            a[Q, Q] = aqq + t * apq
            a[P, Q] = 0.0
            a[Q, P] = 0.0
            vp = v[:, P].copy()
            vq = v[:, Q]
            v[:, P] = c * vp - s * vq
            v[:, Q] = s * vp + c * vq
    return np.diag(a).copy(), v, -1
