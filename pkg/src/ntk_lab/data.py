"""Regression datasets: the synthetic sin/cos task, the two transfer tasks, and
a generic numeric CSV loader."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, MissingColumn, ParseError

X_RANGE = (-6.0, 6.0)
VAL_FRACTION = 0.2


@dataclass
class Dataset:
    """Training inputs/targets plus an optional validation (or test) split.

    ``m`` and ``m_val`` hold prior-mean values at the inputs when a prior is
    attached; ``transform`` records any normalization applied at load time.
    """

    x: np.ndarray
    y: np.ndarray
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None
    m: np.ndarray | None = None
    m_val: np.ndarray | None = None
    transform: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.x = _as_2d(self.x)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.shape[0] != self.y.shape[0]:
            raise DimensionMismatch(f"{self.x.shape[0]} inputs but {self.y.shape[0]} targets")
        if self.x_val is None:
            self.x_val = np.empty((0, self.x.shape[1]))
            self.y_val = np.empty(0)
        self.x_val = _as_2d(self.x_val)
        self.y_val = np.asarray(self.y_val, dtype=np.float64).reshape(-1)
        if self.x_val.shape[0] != self.y_val.shape[0]:
            raise DimensionMismatch("validation inputs and targets differ in length")
        if self.x_val.shape[1] != self.x.shape[1]:
            raise DimensionMismatch("validation inputs have a different dimension")

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def n_train(self):
        return self.x.shape[0]

    @property
    def n_val(self):
        return self.x_val.shape[0]

    def with_prior(self, prior):
        """Copy with ``m``/``m_val`` filled in from a callable prior mean."""
        return Dataset(self.x, self.y, self.x_val, self.y_val,
                       prior(self.x) if self.n_train else np.empty(0),
                       prior(self.x_val) if self.n_val else np.empty(0),
                       dict(self.transform), self.name)

    def head(self, n):
        """First ``n`` training points (validation split kept)."""
        return Dataset(self.x[:n], self.y[:n], self.x_val, self.y_val,
                       None if self.m is None else self.m[:n], self.m_val,
                       dict(self.transform), self.name)

    def split(self, val_fraction=VAL_FRACTION):
        """Move the trailing ``val_fraction`` of the training rows into validation."""
        n_val = int(round(val_fraction * self.n_train))
        cut = self.n_train - n_val
        return Dataset(self.x[:cut], self.y[:cut], self.x[cut:], self.y[cut:],
                       transform=dict(self.transform), name=self.name)

    def write_csv(self, path, which="train"):
        """Write x columns then y, with a header, at 17 significant digits."""
        x, y = (self.x, self.y) if which == "train" else (self.x_val, self.y_val)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j}" for j in range(self.dim)] + ["y"])
            for xi, yi in zip(x, y):
                w.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise DimensionMismatch(f"inputs must be a matrix, got shape {x.shape}")
    return x


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def synthetic_target(x):
    """``sin(x) + cos(2x)`` per coordinate, summed and scaled by ``1/sqrt(d)``."""
    x = _as_2d(x)
    return (np.sin(x) + np.cos(2.0 * x)).sum(axis=1) / np.sqrt(x.shape[1])


def gen_synthetic(n_points, dim=1, noise_sigma=0.1, seed=0, x_range=X_RANGE,
                  val_fraction=VAL_FRACTION):
    """Uniform inputs on ``x_range^dim`` with noisy ``synthetic_target`` labels.

    The last ``val_fraction`` of the points form the validation split.
    """
    if n_points < 1 or dim < 1:
        raise ValueError("n_points and dim must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rx, re = _streams(seed, 2)
    x = rx.uniform(x_range[0], x_range[1], size=(n_points, dim))
    y = synthetic_target(x) + noise_sigma * re.standard_normal(n_points)
    ds = Dataset(x, y, name=f"synthetic-d{dim}")
    return ds.split(val_fraction)


def transfer_target_1(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(x) + 0.5 * np.sin(5.0 * x) + 0.2 * np.sin(20.0 * x)


def transfer_target_2(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sin(x) + 0.3 * np.cos(7.0 * x) - 0.2 * np.sin(15.0 * x)


def gen_transfer_tasks(n1, n2, noise_sigma=0.1, seed=0, n_test=200, x_range=X_RANGE):
    """Two 1-D tasks with shared low-frequency content.

    Task 2 carries ``n_test`` held-out points (noisy labels) as its validation
    split.  Inputs, noise and test points come from separate streams, so the
    first ``k`` task-2 training points and the test set do not depend on ``n2``.
    """
    if n1 < 0 or n2 < 0:
        raise ValueError("task sizes must be nonnegative")
    r1x, r1e, r2x, r2e, rtx, rte = _streams(seed, 6)

    def draw(rx, re, n, f):
        x = rx.uniform(x_range[0], x_range[1], size=(n, 1))
        return x, f(x[:, 0]) + noise_sigma * re.standard_normal(n)

    x1, y1 = draw(r1x, r1e, n1, transfer_target_1)
    x2, y2 = draw(r2x, r2e, n2, transfer_target_2)
    xt, yt = draw(rtx, rte, n_test, transfer_target_2)
    return (Dataset(x1, y1, name="transfer-task1"),
            Dataset(x2, y2, xt, yt, name="transfer-task2"))


def _parse_float(text, row, column):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric cell {text!r}", row=row, column=column) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite cell {text!r}", row=row, column=column)
    return v


def load_csv(path, target_column, normalize=False, val_fraction=0.0, max_rows=None, seed=0):
    """Read a headed numeric CSV; every column other than ``target_column`` is a feature.

    ``max_rows`` keeps a seeded random subsample.  With ``normalize`` the
    features are standardized per column and then divided by the largest row
    norm, so every row lies in the unit ball, and the target is standardized;
    the constants are kept in ``Dataset.transform``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        if target_column not in header:
            raise MissingColumn(target_column)
        t = header.index(target_column)
        feats = [j for j in range(len(header)) if j != t]
        xs, ys = [], []
        for i, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", row=i)
            ys.append(_parse_float(rec[t], i, header[t]))
            xs.append([_parse_float(rec[j], i, header[j]) for j in feats])
    if not ys:
        raise ParseError("no data rows", row=2)
    x = np.array(xs, dtype=np.float64).reshape(len(ys), len(feats))
    y = np.array(ys, dtype=np.float64)
    if max_rows is not None and max_rows < len(y):
        keep = np.sort(np.random.default_rng(seed).permutation(len(y))[:max_rows])
        x, y = x[keep], y[keep]

    transform = {"columns": [header[j] for j in feats], "target": target_column}
    if normalize:
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        z = (x - mean) / sd
        radius = float(np.max(np.linalg.norm(z, axis=1))) if len(z) else 1.0
        radius = radius if radius > 0 else 1.0
        x = z / radius
        y_mean, y_sd = float(y.mean()), float(y.std())
        y_sd = y_sd if y_sd > 0 else 1.0
        y = (y - y_mean) / y_sd
        transform.update(x_mean=mean, x_sd=sd, x_radius=radius, y_mean=y_mean, y_sd=y_sd)
    ds = Dataset(x, y, transform=transform, name=str(path))
    return ds.split(val_fraction) if val_fraction else ds


def invert_targets(ds, y):
    """Undo target standardization from ``load_csv(normalize=True)``."""
    tr = ds.transform
    if "y_sd" not in tr:
        return np.asarray(y, dtype=np.float64)
    return np.asarray(y) * tr["y_sd"] + tr["y_mean"]
