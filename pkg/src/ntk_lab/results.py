"""Result rows, the results.csv format, run manifests and gnuplot scripts."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

from . import __version__

HEADER = ("experiment", "width", "depth", "beta", "seed", "metric", "value", "seconds")
RESULTS_FILE = "results.csv"
MANIFEST_FILE = "manifest.txt"
PLOT_FILE = "plot.gp"
PREDICTIONS_FILE = "predictions.csv"
PREDICTION_HEADER = ("experiment", "width", "depth", "beta", "seed", "point", "net", "reference")


def _fmt(v):
    return f"{v:.17g}"


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    width: int
    depth: int
    beta: float
    seed: int
    metric: str
    value: float
    seconds: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.metric!r} has non-finite value {self.value!r}")

    @property
    def key(self):
        return (self.experiment, self.width, self.depth, self.beta, self.seed, self.metric)

    def cells(self):
        return [self.experiment, str(self.width), str(self.depth), _fmt(self.beta),
                str(self.seed), self.metric, _fmt(self.value), _fmt(self.seconds)]


@dataclass(frozen=True)
class PredictionRow:
    """One validation/test point: the trained network's output next to the reference."""

    experiment: str
    width: int
    depth: int
    beta: float
    seed: int
    point: int
    net: float
    reference: float

    @property
    def key(self):
        return (self.experiment, self.width, self.depth, self.beta, self.seed, self.point)

    def cells(self):
        return [self.experiment, str(self.width), str(self.depth), _fmt(self.beta),
                str(self.seed), str(self.point), _fmt(self.net), _fmt(self.reference)]


def sort_rows(rows):
    return sorted(rows, key=lambda r: r.key)


def write_results(rows, path):
    rows = sort_rows(rows)
    keys = [r.key for r in rows]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate result keys")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in rows:
            w.writerow(r.cells())


def read_results(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != HEADER:
            raise ValueError(f"unexpected results header {header!r}")
        return [ResultRow(e, int(wd), int(dp), float(b), int(s), m, float(v), float(sec))
                for e, wd, dp, b, s, m, v, sec in reader]


def write_predictions(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for r in sorted(rows, key=lambda r: r.key):
            w.writerow(r.cells())


def read_predictions(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [PredictionRow(e, int(wd), int(dp), float(b), int(s), int(i), float(a), float(c))
                for e, wd, dp, b, s, i, a, c in reader]


def strip_timing(path):
    """results.csv contents with the wall-clock column blanked, for byte comparisons."""
    out = []
    with open(path, newline="") as fh:
        for line in fh.read().splitlines():
            out.append(line.rsplit(",", 1)[0])
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# plotting

_SWEEP_METRICS = ("param_frobenius_diff", "function_sup_diff", "jacobian_drift", "lin_gap_sup")


def plot_script(rows, results_name=RESULTS_FILE):
    """A gnuplot script drawing seed-averaged metrics on log axes.

    Width-sweep metrics are plotted against width; transfer MSEs against the
    number of task-2 points, which is encoded in the metric name.
    """
    experiments = sorted({r.experiment for r in rows})
    metrics = sorted({r.metric for r in rows})
    lines = [
        "# gnuplot script; run with: gnuplot plot.gp",
        "set datafile separator ','",
        "set terminal pngcairo size 900,600",
        "set key top right",
        "set grid",
    ]
    if "width_sweep" in experiments:
        present = [m for m in _SWEEP_METRICS if m in metrics]
        lines += [
            "set output 'width_sweep.png'",
            "set logscale xy",
            "set xlabel 'width n'",
            "set ylabel 'difference (mean over seeds)'",
        ]
        parts = [
            f"'{results_name}' using 2:((strcol(1) eq 'width_sweep' && strcol(6) eq '{m}') ? $7 : 1/0) "
            f"smooth unique with linespoints title '{m}'"
            for m in present
        ]
        if parts:
            lines.append("plot " + ", \\\n     ".join(parts))
        lines.append("unset logscale")
    if "transfer" in experiments:
        lines += [
            "set output 'transfer.png'",
            "set logscale y",
            "set xlabel 'task-2 training points'",
            "set ylabel 'test MSE (mean over seeds)'",
        ]
        parts = []
        for name in ("vanilla", "pretrain"):
            prefix = f"test_mse_{name}@n2="
            start = len(prefix) + 1
            parts.append(
                f"'{results_name}' using "
                f"((strcol(1) eq 'transfer' && strstrt(strcol(6), '{prefix}') == 1) ? "
                f"real(strcol(6)[{start}:]) : 1/0):7 smooth unique with linespoints title '{name}'")
        lines.append("plot " + ", \\\n     ".join(parts))
        lines.append("unset logscale")
    if "ensemble" in experiments:
        lines += [
            "set output 'ensemble.png'",
            "set xlabel 'test point'",
            "set ylabel 'z-score of Monte-Carlo mean'",
            f"plot '{results_name}' using 0:((strcol(1) eq 'ensemble' && strstrt(strcol(6), 'z_mean@') == 1) ? $7 : 1/0) "
            "with points title 'z'",
        ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the output bundle

def emit_outputs(rows, output_dir, config=None, predictions=None):
    """Write results.csv, the manifest, a gnuplot script and (optionally) predictions."""
    os.makedirs(output_dir, exist_ok=True)
    rows = sort_rows(rows)
    paths = {"results": os.path.join(output_dir, RESULTS_FILE)}
    write_results(rows, paths["results"])
    paths["manifest"] = os.path.join(output_dir, MANIFEST_FILE)
    with open(paths["manifest"], "w") as fh:
        fh.write(f"library_version={__version__}\n")
        if config is not None:
            fh.write(config.to_text())
    paths["plot"] = os.path.join(output_dir, PLOT_FILE)
    with open(paths["plot"], "w") as fh:
        fh.write(plot_script(rows))
    if predictions is not None:
        paths["predictions"] = os.path.join(output_dir, PREDICTIONS_FILE)
        write_predictions(predictions, paths["predictions"])
    return paths
