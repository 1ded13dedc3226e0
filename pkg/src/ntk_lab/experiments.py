"""Experiment harness: width sweeps, prior-mean transfer, ensemble moments and
single training runs, all driven by a flat ``ExperimentConfig``."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as datasets
from . import kernel, lin, net, train
from .errors import NtkLabError
from .results import PredictionRow, ResultRow

KINDS = ("width_sweep", "transfer", "ensemble", "single_train")
# metadata keys a manifest may carry that are not configuration
MANIFEST_META = ("library_version",)


def _int_list(text):
    return [int(v) for v in str(text).replace(" ", "").split(",") if v != ""]


def _float_list(text):
    return [float(v) for v in str(text).replace(" ", "").split(",") if v != ""]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _eta(text):
    t = str(text).strip()
    return "auto" if t == "auto" else float(t)


def _opt_str(text):
    t = str(text)
    return None if t in ("", "none", "None") else t


def _opt_int(text):
    t = str(text).strip()
    return None if t in ("", "none", "None") else int(t)


def parse_key_values(text):
    """Flat ``key=value`` lines; ``#`` starts a comment, later keys win."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        mapping[k.strip()] = v.strip()
    return mapping


@dataclass
class ExperimentConfig:
    kind: str = "width_sweep"
    # dataset
    dataset: str = "synthetic"  # or "csv"
    dim: int = 1
    n_points: int = 160
    noise_sigma: float = 0.1
    x_min: float = -6.0
    x_max: float = 6.0
    data_seed: int = 0
    val_fraction: float = 0.2
    csv_path: str | None = None
    target_column: str | None = None
    normalize: bool = True
    max_rows: int | None = 2000
    # architecture
    depth: int = 2
    activation: str = "erf"
    sigma_w: float = 1.0
    sigma_b: float = 0.1
    parametrization: str = "ntk"
    train_first_layer_and_biases: bool = False
    # training
    eta0: float | str = "auto"
    max_steps: int = 200_000
    grad_tol: float = 1e-8
    record_every: int = 10
    track_jacobian_drift: bool = True
    # grid
    widths: list = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    betas: list = field(default_factory=lambda: [0.5])
    # transfer
    n1: int = 200
    n2_values: list = field(default_factory=lambda: [0, 5, 10, 20, 50])
    n_test: int = 200
    same_tasks: bool = False
    # ensemble
    n_members: int = 300
    n_train_points: int = 16
    n_test_points: int = 4
    output_dir: str | None = None

    _PARSERS = {
        "kind": str, "dataset": str, "dim": int, "n_points": int, "noise_sigma": float,
        "x_min": float, "x_max": float, "data_seed": int, "val_fraction": float,
        "csv_path": _opt_str, "target_column": _opt_str, "normalize": _bool,
        "max_rows": _opt_int, "depth": int, "activation": str, "sigma_w": float,
        "sigma_b": float, "parametrization": str, "train_first_layer_and_biases": _bool,
        "eta0": _eta, "max_steps": int, "grad_tol": float, "record_every": int,
        "track_jacobian_drift": _bool, "widths": _int_list, "seeds": _int_list,
        "betas": _float_list, "n1": int, "n2_values": _int_list, "n_test": int,
        "same_tasks": _bool, "n_members": int, "n_train_points": int,
        "n_test_points": int, "output_dir": _opt_str,
    }

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.kind != "single_train" and (not self.widths or not self.seeds or not self.betas):
            raise ValueError("widths, seeds and betas must be nonempty")
        if self.dataset not in ("synthetic", "csv"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "csv" and (self.csv_path is None or self.target_column is None):
            raise ValueError("csv datasets need csv_path and target_column")

    # -- key=value text ---------------------------------------------------
    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        for key, value in mapping.items():
            key = key.strip().replace("-", "_")
            if key in MANIFEST_META:
                continue
            if key not in cls._PARSERS:
                raise ValueError(f"unknown configuration key {key!r}")
            kwargs[key] = cls._PARSERS[key](value) if isinstance(value, str) else value
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def with_overrides(self, **changes):
        merged = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **{
            k: (self._PARSERS[k](v) if isinstance(v, str) else v) for k, v in merged.items()})

    def to_text(self):
        lines = []
        for name in self.field_names():
            v = getattr(self, name)
            if isinstance(v, list):
                text = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            elif v is None:
                text = "none"
            else:
                text = str(v).lower() if isinstance(v, bool) else str(v)
            lines.append(f"{name}={text}")
        return "\n".join(lines) + "\n"

    # -- builders ---------------------------------------------------------
    def architecture(self, width, activation=None):
        return net.mlp(self.dim_of_data(), width, self.depth,
                       activation=activation or self.activation,
                       sigma_w=self.sigma_w, sigma_b=self.sigma_b,
                       parametrization=self.parametrization,
                       train_first_layer_and_biases=self.train_first_layer_and_biases)

    def dim_of_data(self):
        if self.kind == "transfer":
            return 1
        if self.dataset == "csv":
            return self.load_data().dim
        return self.dim

    def train_config(self, beta, **extra):
        kwargs = dict(beta=beta, eta0=self.eta0, max_steps=self.max_steps, grad_tol=self.grad_tol,
                      record_every=self.record_every, track_jacobian_drift=self.track_jacobian_drift)
        kwargs.update(extra)
        return train.TrainConfig(**kwargs)

    def load_data(self):
        if self.dataset == "csv":
            return datasets.load_csv(self.csv_path, self.target_column, self.normalize,
                                     self.val_fraction, self.max_rows, self.data_seed)
        return datasets.gen_synthetic(self.n_points, self.dim, self.noise_sigma, self.data_seed,
                                      (self.x_min, self.x_max), self.val_fraction)


def _failed(kind, width, depth, beta, seed, exc, seconds):
    return ResultRow(kind, width, depth, beta, seed, f"failed:{type(exc).__name__}", 0.0, seconds)


# ---------------------------------------------------------------------------
# width sweep

def width_sweep_cell(config, ds, width, seed, beta):
    """Train one (width, seed, beta) cell; return its metrics and validation predictions.

    The shifted network with zero prior is trained by gradient descent, and
    compared against the ridge optimum of the network linearized at the same
    ``theta_0``: parameters on the trainable blocks, and outputs on the
    validation split (where the linearized shifted predictor is the kernel
    ridge regression solution).
    """
    arch = config.architecture(width)
    p0 = net.init_params(arch, seed)
    pred, trace = train.shifted_train(arch, p0, ds, net.PriorMean.zero(),
                                      config.train_config(beta, track_linearized=True))
    state = lin.LinearizedState(arch, p0, ds.x)
    shifted_y = ds.y + state.f0_train
    theta_lin = lin.lin_params_closed_form(state, shifted_y, beta, trace.eta0, math.inf)
    metrics = {
        "param_frobenius_diff": lin.param_frobenius_diff(pred.params, theta_lin, state.mask),
        "steps": float(trace.n_steps),
        "converged": float(trace.converged),
        "final_grad_norm": float(trace.grad_norm[-1]),
        "dist_from_init": float(trace.dist_from_init[-1]),
        "lin_gap_sup": float(np.nanmax(trace.lin_gap)),
    }
    if config.track_jacobian_drift:
        metrics["jacobian_drift"] = float(trace.jacobian_drift[-1])
    net_val = lin_val = np.empty(0)
    if ds.n_val:
        net_val = pred(ds.x_val)
        lin_val = state.predict(theta_lin, ds.x_val) - net.forward_cache(arch, p0, ds.x_val).output
        metrics["function_sup_diff"] = lin.function_sup_diff(net_val, lin_val)
    return metrics, net_val, lin_val, trace


def run_width_sweep(config, predictions=None):
    """Rows for every (width, seed, beta) cell; cells that fail produce a ``failed:`` row."""
    if config.kind != "width_sweep":
        raise ValueError("config.kind must be 'width_sweep'")
    ds = config.load_data()
    rows = []
    for beta in config.betas:
        for width in config.widths:
            for seed in config.seeds:
                t0 = time.perf_counter()
                try:
                    metrics, net_val, lin_val, _ = width_sweep_cell(config, ds, width, seed, beta)
                except (NtkLabError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    rows.append(_failed("width_sweep", width, config.depth, beta, seed, exc,
                                        time.perf_counter() - t0))
                    continue
                sec = time.perf_counter() - t0
                for name, value in metrics.items():
                    rows.append(ResultRow("width_sweep", width, config.depth, beta, seed, name, value, sec))
                if predictions is not None:
                    for i, (a, b) in enumerate(zip(net_val, lin_val)):
                        predictions.append(PredictionRow("width_sweep", width, config.depth, beta, seed,
                                                         i, float(a), float(b)))
    return rows


# ---------------------------------------------------------------------------
# transfer

TASK2_SEED_OFFSET = 1_000_003


def transfer_seed(seed):
    """Initialization seed for the task-2 networks (shared by both strategies)."""
    return seed + TASK2_SEED_OFFSET


def run_transfer(config, predictions=None):
    """Vanilla (zero prior) versus pre-trained prior on task 2, for each ``n2``.

    Task 1 is fitted by a shifted network with zero prior; that predictor is
    the prior mean for the pre-training strategy.  Both strategies start task 2
    from the same fresh initialization.  Test MSE is measured on the held-out
    noisy task-2 points.
    """
    if config.kind != "transfer":
        raise ValueError("config.kind must be 'transfer'")
    width = config.widths[0]
    rows = []
    n2_max = max(config.n2_values) if config.n2_values else 0
    for beta in config.betas:
        for seed in config.seeds:
            t0 = time.perf_counter()
            task1, task2_full = datasets.gen_transfer_tasks(config.n1, n2_max, config.noise_sigma,
                                                            seed, config.n_test,
                                                            (config.x_min, config.x_max))
            if config.same_tasks:
                task1 = datasets.Dataset(task2_full.x, task2_full.y, name="transfer-task1")
            arch = config.architecture(width)
            # drift is not reported here, so skip the per-record Jacobian work
            transfer_cfg = config.train_config(beta, track_jacobian_drift=False)
            try:
                prior1, _ = train.shifted_train(arch, net.init_params(arch, seed), task1,
                                                net.PriorMean.zero(), transfer_cfg)
            except (NtkLabError, ArithmeticError) as exc:
                rows.append(_failed("transfer", width, config.depth, beta, seed, exc,
                                    time.perf_counter() - t0))
                continue
            pretrained = net.PriorMean.pretrained(prior1)
            p0 = net.init_params(arch, transfer_seed(seed))
            y_test = task2_full.y_val
            for n2 in config.n2_values:
                task2 = task2_full.head(n2)
                for name, prior in (("vanilla", net.PriorMean.zero()), ("pretrain", pretrained)):
                    t1 = time.perf_counter()
                    metric = f"test_mse_{name}@n2={n2}"
                    try:
                        pred, _ = train.shifted_train(arch, p0, task2, prior, transfer_cfg)
                    except (NtkLabError, ArithmeticError) as exc:
                        rows.append(ResultRow("transfer", width, config.depth, beta, seed,
                                              f"failed:{type(exc).__name__}@{name}@n2={n2}", 0.0,
                                              time.perf_counter() - t1))
                        continue
                    out = pred(task2_full.x_val)
                    mse = float(np.mean((out - y_test) ** 2))
                    rows.append(ResultRow("transfer", width, config.depth, beta, seed, metric, mse,
                                          time.perf_counter() - t1))
                    if predictions is not None:
                        tag = f"transfer:{name}@n2={n2}"
                        for i, (a, b) in enumerate(zip(out, y_test)):
                            predictions.append(PredictionRow(tag, width, config.depth, beta, seed,
                                                             i, float(a), float(b)))
    return rows


# ---------------------------------------------------------------------------
# ensemble

def ensemble_data(config):
    """Training and test inputs for the ensemble experiment, from the synthetic task."""
    n = config.n_train_points + config.n_test_points
    full = datasets.gen_synthetic(n, config.dim, config.noise_sigma, config.data_seed,
                                  (config.x_min, config.x_max), val_fraction=0.0)
    k = config.n_train_points
    return datasets.Dataset(full.x[:k], full.y[:k], full.x[k:], full.y[k:], name="ensemble")


def ensemble_outputs(config, width, beta, ds=None):
    """Converged linearized-network test outputs for ``n_members`` initializations,
    plus the seed-averaged NTK and NNGP Gram blocks needed for the moments."""
    ds = ensemble_data(config) if ds is None else ds
    arch = config.architecture(width)
    X_all = np.vstack([ds.x_val, ds.x])
    m = ds.n_val
    outs = np.empty((config.n_members, m))
    theta_sum = np.zeros((X_all.shape[0],) * 2)
    nngp_sum = np.zeros_like(theta_sum)
    for j in range(config.n_members):
        p0 = net.init_params(arch, j)
        state = lin.LinearizedState(arch, p0, ds.x)
        cache_all = net.forward_cache(arch, p0, X_all)
        deltas_all = net.unit_deltas(arch, p0, cache_all)
        Th = net.gram_from_caches(arch, cache_all, deltas_all, cache_all, deltas_all, state.blocks)
        Th = 0.5 * (Th + Th.T)
        K = kernel.network_nngp(arch, p0, X_all).values
        f0 = cache_all.output
        outs[j] = kernel.posterior_mean(Th[m:, m:], Th[:m, m:], ds.y, f0[m:], f0[:m], beta)
        theta_sum += Th
        nngp_sum += K
    return outs, theta_sum / config.n_members, nngp_sum / config.n_members, m


def run_ensemble(config, predictions=None):
    """Monte-Carlo moments of trained linearized networks against ``ensemble_moments``."""
    if config.kind != "ensemble":
        raise ValueError("config.kind must be 'ensemble'")
    rows = []
    ds = ensemble_data(config)
    for beta in config.betas:
        for width in config.widths:
            t0 = time.perf_counter()
            outs, Th, K, m = ensemble_outputs(config, width, beta, ds)
            mu, Sigma = kernel.ensemble_moments(Th[:m, m:], Th[m:, m:], K[:m, :m], K[:m, m:],
                                                K[m:, m:], ds.y, beta)
            M = outs.shape[0]
            mc_mean = outs.mean(axis=0)
            mc_var = outs.var(axis=0, ddof=1)
            se = np.sqrt(mc_var / M)
            sec = time.perf_counter() - t0
            for i in range(m):
                vals = {
                    f"mc_mean@{i}": mc_mean[i],
                    f"mu@{i}": mu[i],
                    f"z_mean@{i}": (mc_mean[i] - mu[i]) / se[i] if se[i] > 0 else 0.0,
                    f"mc_var@{i}": mc_var[i],
                    f"sigma_diag@{i}": Sigma[i, i],
                    f"var_rel_err@{i}": (mc_var[i] - Sigma[i, i]) / Sigma[i, i] if Sigma[i, i] > 0 else 0.0,
                }
                for name, v in vals.items():
                    rows.append(ResultRow("ensemble", width, config.depth, beta, -1, name, float(v), sec))
                if predictions is not None:
                    predictions.append(PredictionRow("ensemble", width, config.depth, beta, -1, i,
                                                     float(mc_mean[i]), float(mu[i])))
    return rows


# ---------------------------------------------------------------------------
# single run

def run_single_train(config, predictions=None):
    """Train one network (first width, seed and beta) and report its final state."""
    if config.kind != "single_train":
        raise ValueError("config.kind must be 'single_train'")
    ds = config.load_data()
    width, seed, beta = config.widths[0], config.seeds[0], config.betas[0]
    arch = config.architecture(width)
    p0 = net.init_params(arch, seed)
    t0 = time.perf_counter()
    try:
        pred, trace = train.shifted_train(arch, p0, ds, net.PriorMean.zero(), config.train_config(beta))
    except (NtkLabError, ArithmeticError) as exc:
        return [_failed("single_train", width, config.depth, beta, seed, exc, time.perf_counter() - t0)]
    sec = time.perf_counter() - t0
    metrics = {
        "final_loss": trace.loss[-1],
        "final_grad_norm": trace.grad_norm[-1],
        "dist_from_init": trace.dist_from_init[-1],
        "steps": float(trace.n_steps),
        "converged": float(trace.converged),
        "eta0": trace.eta0,
        "train_mse": float(np.mean((pred(ds.x) - ds.y) ** 2)),
    }
    if config.track_jacobian_drift:
        metrics["jacobian_drift"] = trace.jacobian_drift[-1]
    if ds.n_val:
        out = pred(ds.x_val)
        metrics["val_mse"] = float(np.mean((out - ds.y_val) ** 2))
        if predictions is not None:
            for i, (a, b) in enumerate(zip(out, ds.y_val)):
                predictions.append(PredictionRow("single_train", width, config.depth, beta, seed,
                                                 i, float(a), float(b)))
    return [ResultRow("single_train", width, config.depth, beta, seed, k, float(v), sec)
            for k, v in metrics.items()]


RUNNERS = {
    "width_sweep": run_width_sweep,
    "transfer": run_transfer,
    "ensemble": run_ensemble,
    "single_train": run_single_train,
}


def run(config, predictions=None):
    return RUNNERS[config.kind](config, predictions)
