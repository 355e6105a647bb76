"""Command-line entry point.

    smiso run <config>         run every (method, seed) cell, write the trace CSV
    smiso variance <config>    compare variance ratios for the perturbation
    smiso boundcheck <config>  statistical checks of the convergence bounds
    smiso synth <spec>         write a synthetic dataset (LIBSVM or CSV)

Exit codes: 0 success, 1 configuration error, 2 runtime failure (including
a failed bound check or any failed cell).
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import DataSource, load_config
from .exceptions import ConfigError, InvalidInputError, ParseError
from .experiment import (format_boundcheck, format_csv, run_boundcheck, run_experiment,
                         summarize, variance_report)

logger = logging.getLogger("smiso")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _write(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def summary_path(out):
    out = Path(out)
    return out.with_name(out.stem + "_summary.csv")


def cmd_run(args):
    cfg = load_config(args.config)
    out = args.out or cfg.output
    result = run_experiment(cfg, workers=args.workers)
    _write(format_csv(result.rows), out)
    summary = summarize(result, cfg)
    if out is not None:
        summary_path(out).write_text(summary)
        logger.info("wrote %s and %s", out, summary_path(out))
    else:
        sys.stderr.write(summary)
    if result.failures:
        for label, seed, err in result.failures:
            sys.stderr.write(f"cell {label} seed {seed} failed: {err}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_variance(args):
    cfg = load_config(args.config)
    _write("\n".join(variance_report(cfg)) + "\n", args.out)
    return EXIT_OK


def cmd_boundcheck(args):
    cfg = load_config(args.config)
    results = run_boundcheck(cfg, workers=args.workers)
    _write(format_boundcheck(results), args.out)
    ok = all(r.passed for r in results)
    sys.stderr.write(f"verdict: {'PASS' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_synth(args):
    spec_text = args.spec
    path = Path(spec_text)
    if path.is_file():
        spec_text = path.read_text().strip()
    source = DataSource.parse(spec_text, ".")
    if source.kind not in ("synth_gaussian", "synth_heterogeneous"):
        raise ConfigError("synth expects synth_gaussian(...) or synth_heterogeneous(...)")
    p = source.params
    if source.kind == "synth_gaussian":
        ds = data_mod.synth_gaussian(p["n"], p["d"], p["seed"], p.get("label_noise", 0.0))
    else:
        ds = data_mod.synth_heterogeneous(p["n"], p["d"], p["seed"], p["spread"],
                                          p.get("density", 0.1), p.get("label_noise", 0.0))
    fmt = args.format
    if fmt is None:
        fmt = "csv" if args.out and str(args.out).endswith(".csv") else "libsvm"
    if fmt == "csv":
        if ds.is_sparse:
            ds = data_mod.Dataset.from_dense(ds.matrix().toarray(), ds.labels)
        text = data_mod.serialize_csv(ds)
    else:
        text = data_mod.serialize_libsvm(ds)
    _write(text, args.out)
    nsq = np.asarray(ds.norms_sq)
    sys.stderr.write(f"n={ds.n} dim={ds.dim} max/mean squared norm "
                     f"(max L_i / mean L_i as mu -> 0): {nsq.max() / nsq.mean():.4g}\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="smiso", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--out", type=Path, default=None, help="output file (default: stdout)")
        if workers:
            p.add_argument("--workers", type=int, default=None,
                           help="parallel worker processes (default: config value)")
        p.add_argument("--log-level", default=argparse.SUPPRESS,
                       choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = sub.add_parser("run", help="run an experiment configuration")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("variance", help="variance-ratio report")
    p.add_argument("config")
    common(p, workers=False)
    p.set_defaults(func=cmd_variance)
    p = sub.add_parser("boundcheck", help="statistical convergence-bound checks")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_boundcheck)
    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("spec", help="e.g. 'synth_gaussian(n=100, d=20, seed=1)' or a file holding it")
    p.add_argument("--format", choices=["libsvm", "csv"], default=None)
    common(p, workers=False)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; here 2 means a runtime failure
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        sys.stderr.write("error: --workers must be >= 1\n")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ParseError, InvalidInputError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
