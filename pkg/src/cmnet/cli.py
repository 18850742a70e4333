"""Command line entry point: generate, fit, eval, bench, trace."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cmn import CMNModel, FitConfig, FitError, fit
from .data import DataError, PinwheelParams, Standardization, generate_pinwheel, load_csv, standardize, stratified_split, write_csv
from .distributions import DomainError
from .experiment import ExperimentConfig, ExperimentError, evaluate, pinwheel_protocol, run_experiment
from .io import PosteriorFormatError, load_posterior, read_posterior_file, save_posterior

log = logging.getLogger("cmnet")


def _label_column(value: str):
    if value == "last":
        return value
    try:
        return int(value)
    except ValueError:
        return value


def _add_data_args(p):
    p.add_argument("--data", required=True, help="CSV file, label in the last column by default")
    p.add_argument("--label-column", default="last", type=_label_column)
    p.add_argument("--no-header", action="store_true")


def cmd_generate(args) -> int:
    if args.n % args.clusters:
        print(f"--n must be a multiple of --clusters ({args.clusters})", file=sys.stderr)
        return 1
    params = PinwheelParams(args.clusters, args.radial, args.tangential, args.rate, args.n // args.clusters, args.seed)
    ds = generate_pinwheel(params)
    if args.test_out:
        train, test = stratified_split(ds, seed=args.seed, test_size=args.test_size)
        write_csv(train, args.out)
        write_csv(test, args.test_out)
        print(f"wrote {len(train)} rows to {args.out} and {len(test)} rows to {args.test_out}")
    else:
        write_csv(ds, args.out)
        print(f"wrote {len(ds)} rows to {args.out}")
    return 0


def cmd_fit(args) -> int:
    ds = load_csv(args.data, args.label_column, not args.no_header)
    if not args.no_standardize:
        ds, _ = standardize(ds)
    L = ds.num_classes
    model = CMNModel(
        d=ds.d, h=args.h or L - 1, K=args.k, L=L,
        v0=args.v0, a0=args.a0, b0=args.b0, sigma0=args.sigma, sigma1=args.sigma,
    )
    config = FitConfig(max_sweeps=args.sweeps, inner_iters=args.inner_iters, seed=args.seed)
    post, trace = fit(model, ds.features, ds.labels, config)
    metadata = {
        "class_names": list(ds.class_names) if ds.class_names else None,
        "standardization": ds.standardization.to_dict() if ds.standardization else None,
        "fit_config": asdict(config),
        "warnings": dict(trace.warnings),
    }
    extra = {
        "elbo_trace": np.asarray(trace.elbo_per_sweep),
        "wall_time_per_sweep": np.asarray(trace.wall_time_per_sweep),
    }
    save_posterior(args.out, model, post.globals_only(), seed=args.seed, metadata=metadata, extra_arrays=extra)
    print(f"final elbo {trace.elbo_per_sweep[-1]!r} after {len(trace)} sweeps")
    return 0


def cmd_eval(args) -> int:
    model, post, manifest, _ = load_posterior(args.posterior)
    meta = manifest.get("metadata", {})
    names = meta.get("class_names")
    ds = load_csv(args.data, args.label_column, not args.no_header, class_names=names)
    if meta.get("standardization"):
        st = Standardization.from_dict(meta["standardization"])
        ds = type(ds)(st.apply(ds.features), ds.labels, ds.class_names, st, model.L)
    if ds.d != model.d:
        raise DataError(f"data has {ds.d} features, posterior expects {model.d}")
    metrics = evaluate(post, ds, ds, args.samples, args.bins, args.seed)
    # WAIC from evaluate is on the rows passed as training data; here that is
    # the evaluation file itself
    print(json.dumps({"n": len(ds), **metrics}, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    if args.config:
        cfg = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
        if args.out:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "output": args.out})
    else:
        overrides = {"output": args.out, "master_seed": args.seed}
        if args.restarts is not None:
            overrides["restarts"] = args.restarts
        if args.sweeps is not None:
            overrides["max_sweeps"] = args.sweeps
        if args.sizes:
            overrides["train_sizes"] = tuple(args.sizes)
        if args.k is not None:
            overrides["K"] = args.k
        if args.data:
            overrides["dataset"] = {"kind": "csv", "path": args.data, "label_column": "last", "has_header": True}
            overrides["test_size"] = None
            overrides["test_fraction"] = args.test_fraction
        if args.no_standardize:
            overrides["standardize"] = False
        cfg = pinwheel_protocol(**overrides)

    def progress(row):
        log.info("size %d restart %d: acc %.4f elbo %.4f (%.1fs)",
                 row["train_size"], row["restart"], row["accuracy"], row["final_elbo"], row["wall_seconds"])

    record = run_experiment(cfg, progress)
    for agg in record["aggregates"]:
        print(f"{agg['train_size']:>6}  acc {agg['accuracy_mean']:.4f} +- {agg['accuracy_std']:.4f}  "
              f"lpd {agg['lpd_mean']:.4f}  ece {agg['ece_mean']:.4f}  waic {agg['waic_mean']:.4f}")
    return 0


def cmd_trace(args) -> int:
    manifest, arrays = read_posterior_file(args.posterior)
    if "extra/elbo_trace" not in arrays:
        raise PosteriorFormatError(f"{args.posterior} has no stored trace")
    elbo = arrays["extra/elbo_trace"]
    wall = arrays.get("extra/wall_time_per_sweep", np.full_like(elbo, np.nan))
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["sweep", "elbo", "wall_seconds"])
        for i, (e, t) in enumerate(zip(elbo, wall), start=1):
            w.writerow([i, repr(float(e)), repr(float(t))])
    finally:
        if args.out:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a pinwheel CSV")
    g.add_argument("--clusters", type=int, default=5)
    g.add_argument("--radial", type=float, default=0.7)
    g.add_argument("--tangential", type=float, default=0.3)
    g.add_argument("--rate", type=float, default=0.2)
    g.add_argument("--n", type=int, default=2100, help="total points")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--test-out", help="also write a stratified held-out split here")
    g.add_argument("--test-size", type=int, default=500)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit one model and save the posterior")
    _add_data_args(f)
    f.add_argument("--k", type=int, default=20)
    f.add_argument("--h", type=int, default=None, help="latent width (default L-1)")
    f.add_argument("--sweeps", type=int, default=500)
    f.add_argument("--inner-iters", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--v0", type=float, default=10.0)
    f.add_argument("--a0", type=float, default=2.0)
    f.add_argument("--b0", type=float, default=1.0)
    f.add_argument("--sigma", type=float, default=5.0, help="prior std of stick coefficients")
    f.add_argument("--no-standardize", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="print metrics of a saved posterior on a CSV")
    e.add_argument("--posterior", required=True)
    _add_data_args(e)
    e.add_argument("--samples", type=int, default=64)
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run the multi-size, multi-restart protocol")
    b.add_argument("--config", help="JSON ExperimentConfig; other flags except --out are ignored")
    b.add_argument("--data", help="CSV dataset instead of the pinwheel")
    b.add_argument("--test-fraction", type=float, default=0.2)
    b.add_argument("--sizes", type=int, nargs="+")
    b.add_argument("--restarts", type=int)
    b.add_argument("--sweeps", type=int)
    b.add_argument("--k", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-standardize", action="store_true")
    b.add_argument("--out", required=True, help="results JSON; the summary CSV goes next to it")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("trace", help="dump the stored ELBO trace as CSV")
    t.add_argument("--posterior", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ExperimentError as err:
        where = f" (partial results in {err.path})" if err.path else ""
        print(f"error: {err}{where}", file=sys.stderr)
        return 1
    except (DataError, DomainError, FitError, PosteriorFormatError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
