"""Command line entry point ``apce``.

Exit codes: 0 success, 2 configuration or usage error, 3 computation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .basis import BasisError, gram_schmidt_discrete, load_basis, near_orthonormal, save_basis
from .diagnostics import basis_bound_table, gram_deviation, ric_constants
from .harness import (ConfigError, ExperimentError, bundled_configs, load_config, run_experiment,
                      target_descriptions)
from .measure import MeasureError, read_samples_csv
from .rotation import load_surrogate
from .sparse_solver import assemble_measurement_matrix, write_matrix_csv

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE = 0, 2, 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, args.outputs)
    out = args.outputs or cfg.outputs or f"apce-out/{cfg.name}"
    print(f"{cfg.name}: {len(report['curves'])} curve points written to {out}")
    return EXIT_OK


def _cmd_build_basis(args) -> int:
    S = read_samples_csv(args.samples)
    if args.kind == "exact":
        basis = gram_schmidt_discrete(S, S.d, args.degree)
    else:
        basis = near_orthonormal(S, S.d, args.degree, mode=args.mode)
    save_basis(args.out, basis)
    print(f"{basis.provenance} basis with {basis.size} functions written to {args.out}")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    basis = load_basis(args.basis)
    S = read_samples_csv(args.samples)
    out: dict = {"basis": args.basis, "samples": args.samples, "n": S.n}
    out["basis_bound"] = {str(k): v for k, v in basis_bound_table(basis, S, args.m_sigma).items()}
    out["gram_deviation"] = gram_deviation(basis, S)
    if args.ric_support:
        T = [int(t) for t in args.ric_support.split(",")]
        A = assemble_measurement_matrix(basis, S) / np.sqrt(S.n)
        out["ric"] = ric_constants(A, T, budget=args.budget).to_dict()
    if args.matrix_csv:
        write_matrix_csv(args.matrix_csv, assemble_measurement_matrix(basis, S))
    text = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_predict(args) -> int:
    sur = load_surrogate(args.surrogate)
    S = read_samples_csv(args.points)
    vals = sur.predict(S.points)
    dest = open(args.out, "w") if args.out else sys.stdout
    try:
        dest.write("value\n")
        for v in vals:
            dest.write(format(float(v), ".17g") + "\n")
    finally:
        if args.out:
            dest.close()
    return EXIT_OK


def _cmd_list_targets(args) -> int:
    for name, desc in sorted(target_descriptions().items()):
        print(f"{name:10s} {desc}")
    print()
    print("bundled configs: " + ", ".join(sorted(bundled_configs())))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apce", description="data-driven polynomial chaos surrogates")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config (file path or bundled name)")
    p.add_argument("config")
    p.add_argument("-o", "--outputs", help="output directory (overrides the config)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("build-basis", help="build an orthonormal basis on a sample CSV")
    p.add_argument("samples")
    p.add_argument("-p", "--degree", type=int, required=True)
    p.add_argument("-k", "--kind", choices=("exact", "near"), default="exact")
    p.add_argument("--mode", choices=("pairwise", "grouped"), default="pairwise")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_build_basis)

    p = sub.add_parser("diagnose", help="basis bound, Gram deviation and RIC of a basis on samples")
    p.add_argument("basis")
    p.add_argument("samples")
    p.add_argument("--m-sigma", type=float, nargs="+", default=[3, 4, 5, 6])
    p.add_argument("--ric-support", help="comma-separated column indices")
    p.add_argument("--budget", type=int, default=10**6)
    p.add_argument("--matrix-csv", help="also write the measurement matrix here")
    p.add_argument("-o", "--out")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("predict", help="evaluate a saved surrogate on a point CSV")
    p.add_argument("surrogate")
    p.add_argument("points")
    p.add_argument("-o", "--out")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("list-targets", help="list registered targets and bundled configs")
    p.set_defaults(func=_cmd_list_targets)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, MeasureError) as exc:
        print(f"apce: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, BasisError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"apce: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
