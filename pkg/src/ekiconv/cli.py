"""Command line entry point: ``ekiconv {run,verify,figure1,order}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .analysis import fit_order

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("ekiconv")


def _load(args):
    sc = experiment.load_scenario(args.scenario)
    if args.seed is not None:
        sc["run"]["seed"] = args.seed
    return sc


def cmd_run(args) -> int:
    sc = _load(args)
    report = experiment.run_study(
        sc, jobs=args.jobs,
        progress=lambda done, total: log.info("replicas %d/%d", done, total))
    path = experiment.write_report(report, args.out, sc["run"]["histogram_bins"])
    for s in report.per_level:
        log.info("level %2d  h=%.3e  mean sup err=%.4e  p_hat=%.3f  exploded=%.4f",
                 s.level, s.h, s.mean_sup_err, s.p_hat, s.exploded_frac)
    if report.fitted_order is not None:
        log.info("fitted order %.3f", report.fitted_order)
    print(path)
    return EXIT_OK


def cmd_verify(args) -> int:
    sc = _load(args)
    reports = experiment.verify_scenario(sc)
    doc = json.dumps([r.to_dict() for r in reports], indent=2, default=float)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(doc + "\n")
    print(doc)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_figure1(args) -> int:
    times, means, summary = experiment.figure1(args.mode, args.J, args.level,
                                               0 if args.seed is None else args.seed)
    experiment.write_figure1(args.out, times, means, summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_order(args) -> int:
    rows = []
    for p in args.reports:
        try:
            rep = experiment.read_report(p)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise experiment.ConfigError(f"{p}: unreadable report ({exc})") from exc
        levels = [s for s in rep.per_level if args.min_level <= s.level <= args.max_level]
        h = [s.h for s in levels]
        err = [s.mean_sup_err for s in levels]
        try:
            slope, resid = fit_order(h, err)
        except ValueError as exc:
            raise experiment.ConfigError(f"{p}: {exc}") from exc
        rows.append({"report": str(p), "levels": [s.level for s in levels],
                     "fitted_order": slope, "residual": resid})
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ekiconv", description="Discretisation studies for stochastic EKI.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", help="scenario TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("run", help="refinement study: report.json, report.csv, histograms")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="identity and monotonicity checks on a linear scenario")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("figure1", help="mean path on the diag(100, 1) example")
    common(p, scenario=False)
    p.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    p.add_argument("--J", type=int, default=5)
    p.add_argument("--level", type=int, default=14)
    p.set_defaults(func=cmd_figure1)

    p = sub.add_parser("order", help="refit the convergence order of existing reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--min-level", type=int, default=0)
    p.add_argument("--max-level", type=int, default=10 ** 6)
    p.set_defaults(func=cmd_order)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except np.linalg.LinAlgError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
