"""Command-line entry point ``ntk-lab``."""
from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from . import data as datasets
from .experiments import ExperimentConfig, parse_key_values, run
from .results import emit_outputs, plot_script, read_results

OUT_ENV = "NTK_LAB_OUT"
DEFAULT_OUT = "ntk_lab_out"

SUBCOMMAND_KIND = {
    "train": "single_train",
    "sweep": "width_sweep",
    "transfer": "transfer",
    "ensemble": "ensemble",
}


def _output_dir(args, config, kind):
    if args.out:
        return args.out
    if config.output_dir:
        return config.output_dir
    return os.path.join(os.environ.get(OUT_ENV, DEFAULT_OUT), kind)


def _load_config(args, kind):
    mapping = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            mapping = parse_key_values(fh.read())
    mapping["kind"] = kind
    for key in ("widths", "seeds", "betas"):
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        mapping[k.strip()] = v.strip()
    return ExperimentConfig.from_mapping(mapping)


def _cmd_run(args):
    kind = SUBCOMMAND_KIND[args.command]
    config = _load_config(args, kind)
    out = _output_dir(args, config, kind)
    predictions = []
    rows = run(config, predictions)
    paths = emit_outputs(rows, out, config, predictions)
    failed = [r for r in rows if r.metric.startswith("failed:")]
    print(f"{len(rows)} rows written to {paths['results']}" + (f" ({len(failed)} failed cells)" if failed else ""))
    return 0


def _cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)
    if args.task == "synthetic":
        ds = datasets.gen_synthetic(args.n_points, args.dim, args.noise_sigma, args.seed,
                                    val_fraction=args.val_fraction)
        ds.write_csv(os.path.join(args.out, "train.csv"), "train")
        ds.write_csv(os.path.join(args.out, "val.csv"), "val")
        print(f"wrote {ds.n_train} training and {ds.n_val} validation rows to {args.out}")
    else:
        t1, t2 = datasets.gen_transfer_tasks(args.n1, args.n2, args.noise_sigma, args.seed, args.n_test)
        t1.write_csv(os.path.join(args.out, "task1.csv"), "train")
        t2.write_csv(os.path.join(args.out, "task2_train.csv"), "train")
        t2.write_csv(os.path.join(args.out, "task2_test.csv"), "val")
        print(f"wrote transfer tasks ({t1.n_train} / {t2.n_train} / {t2.n_val} rows) to {args.out}")
    return 0


def _cmd_plot_script(args):
    rows = read_results(args.results)
    text = plot_script(rows, os.path.basename(args.results))
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ntk-lab", description="Wide-network / NTK-GP experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("train", "train one network and report its final state"),
        ("sweep", "width sweep: trained network vs. linearized ridge solution"),
        ("transfer", "prior-mean transfer between two related tasks"),
        ("ensemble", "Monte-Carlo ensemble moments vs. the closed form"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value configuration file (a manifest works too)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<experiment>)")
        sp.add_argument("--widths", help="comma-separated widths")
        sp.add_argument("--seeds", help="comma-separated seeds")
        sp.add_argument("--beta", dest="betas", help="comma-separated beta values")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        sp.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen-data", help="write a generated dataset as CSV")
    g.add_argument("task", choices=("synthetic", "transfer"), nargs="?", default="synthetic")
    g.add_argument("--out", required=True)
    g.add_argument("--n-points", type=int, default=160)
    g.add_argument("--dim", type=int, default=1)
    g.add_argument("--noise-sigma", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--n1", type=int, default=200)
    g.add_argument("--n2", type=int, default=20)
    g.add_argument("--n-test", type=int, default=200)
    g.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("plot-script", help="emit a gnuplot script for a results.csv")
    s.add_argument("results")
    s.add_argument("-o", "--output")
    s.set_defaults(func=_cmd_plot_script)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"ntk-lab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
