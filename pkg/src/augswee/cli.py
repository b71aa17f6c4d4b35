"""Command-line interface: ``estimate``, ``ci``, ``test`` and ``simulate``.

Exit codes: 0 success, 2 input parse error, 3 convergence failure,
4 configuration error (including bad command-line usage).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .estfun import build_system
from .exceptions import ConvergenceError, CSVFormatError, DesignError, SingularMatrixError
from .gel import ensure_converged, fit_gel, fit_gmm
from .inference import ci_invert, gel_ratio
from .population import ColumnMap, load_sample_csv
from .variance import bootstrap, variance_report

EXIT_PARSE, EXIT_CONVERGENCE, EXIT_CONFIG = 2, 3, 4
CI_METHODS = ("el", "et", "cu", "gmm", "bcn", "bcp")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="sample CSV (columns z and weight or pi)")
    p.add_argument("--measure", default="quantile_share", choices=["quantile_share", "lorenz", "gini"])
    p.add_argument("--tau1", type=float, default=None)
    p.add_argument("--tau2", type=float, default=None)
    p.add_argument("--tau", type=float, default=0.5, help="Lorenz ordinate level")
    p.add_argument("--cuts", default=None,
                   help="comma-separated cut points giving consecutive share cells, e.g. 0,0.2,0.4,0.6,0.8,1")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--augmented", dest="augmented", action="store_true")
    grp.add_argument("--conventional", dest="augmented", action="store_false")
    p.add_argument("--family", default="el", choices=["el", "et", "cu", "gmm"])
    p.add_argument("--omega", default="auto", choices=["auto", "pps_wr", "hajek", "stratified", "cluster"])
    p.add_argument("--gamma-B", dest="gamma_B", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--population-size", dest="population_size", type=float, default=None)
    p.add_argument("--rescale-weights", dest="rescale", action="store_true",
                   help="rescale weights to sum to n before fitting")
    p.add_argument("--output", default=None, help="JSON report path (default: standard output)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="augswee", description="Augmented survey-weighted GEL inference")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("estimate", help="point estimates and standard errors")
    _add_common(p)
    p = sub.add_parser("ci", help="confidence intervals")
    _add_common(p)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--methods", default=None, help=f"comma-separated subset of {','.join(CI_METHODS)}")
    p.add_argument("--boot-B", dest="boot_B", type=int, default=500)
    p.add_argument("--boot-mode", dest="boot_mode", default=None, choices=["normal", "percentile"])
    p = sub.add_parser("test", help="ratio test of a hypothesized value")
    _add_common(p)
    p.add_argument("--null", required=True, help='hypothesized value, e.g. "theta=0.1"')
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--calibration", default="auto", choices=["auto", "chi2", "weighted"])
    p = sub.add_parser("simulate", help="Monte Carlo coverage tables")
    p.add_argument("--scenario", required=True, help="scenario JSON (bundled: designA.json ... designD.json)")
    p.add_argument("--output", required=True, help="output directory for the tables")
    p.add_argument("--M", type=int, default=None, help="override the replicate count")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--methods", default=None)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--boot-B", dest="boot_B", type=int, default=None)
    p.add_argument("--gamma-B", dest="gamma_B", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    return parser


def _cells(args) -> list[dict]:
    if args.measure == "gini":
        return [{"measure": "gini"}]
    if args.measure == "lorenz":
        return [{"measure": "lorenz", "tau": args.tau}]
    if args.cuts is not None:
        try:
            cuts = [float(c) for c in args.cuts.split(",")]
        except ValueError:
            raise ConfigError(f"--cuts must be comma-separated numbers; got {args.cuts!r}") from None
        if len(cuts) < 2 or any(b <= a for a, b in zip(cuts, cuts[1:])) or cuts[0] < 0 or cuts[-1] > 1:
            raise ConfigError("--cuts must be increasing values in [0, 1]")
        return [{"measure": "quantile_share", "tau1": a, "tau2": b} for a, b in zip(cuts, cuts[1:])]
    if args.tau1 is None or args.tau2 is None:
        raise ConfigError("quantile_share needs --tau1 and --tau2, or --cuts")
    return [{"measure": "quantile_share", "tau1": args.tau1, "tau2": args.tau2}]


def _check_ranges(args) -> None:
    if args.gamma_B < 10:
        raise ConfigError("--gamma-B must be at least 10")
    level = getattr(args, "level", 0.95)
    if level is not None and not 0 < level < 1:
        raise ConfigError("--level must lie in (0, 1)")
    if getattr(args, "boot_B", 500) is not None and getattr(args, "boot_B", 500) < 50:
        raise ConfigError("--boot-B must be at least 50")
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")


def _resolved(args) -> dict:
    cfg = {k: v for k, v in vars(args).items()}
    cfg["input"] = str(Path(args.input).resolve()) if getattr(args, "input", None) else None
    return cfg


def _fit(sample, system, family):
    fit = fit_gmm(sample, system) if family == "gmm" else fit_gel(sample, system, family)
    return ensure_converged(fit)


def _load(args):
    return load_sample_csv(args.input, ColumnMap(), population_size=args.population_size, rescale=args.rescale)


def _systems(args):
    out = []
    for cfg in _cells(args):
        cfg["augmented"] = args.augmented
        try:
            out.append((cfg, build_system(cfg)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return out


def _point(sample, system, args):
    fit = _fit(sample, system, args.family)
    rep = variance_report(sample, system, fit, omega=args.omega, gamma_B=args.gamma_B, seed=args.seed)
    return fit, rep


def cmd_estimate(args) -> dict:
    _check_ranges(args)
    systems = _systems(args)
    sample = _load(args)
    results = []
    for cfg, system in systems:
        fit, rep = _point(sample, system, args)
        results.append({
            "cell": cfg,
            "estimate": float(fit.theta[0]),
            "se": float(rep.se[0]),
            "omega_method": rep.omega_method,
            "gamma_B": rep.resample_B,
            "fit": fit.to_dict(),
        })
    return {"command": "estimate", "config": _resolved(args), "n": sample.n, "results": results}


def _methods(args) -> list[str]:
    if args.methods is None:
        methods = [args.family]
        if args.boot_mode is not None:
            methods.append("bcn" if args.boot_mode == "normal" else "bcp")
        return methods
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in CI_METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown method(s) {bad}; valid methods are {', '.join(CI_METHODS)}")
    return methods


def cmd_ci(args) -> dict:
    _check_ranges(args)
    methods = _methods(args)
    systems = _systems(args)
    sample = _load(args)
    results = []
    for cfg, system in systems:
        fit, rep = _point(sample, system, args)
        intervals = {}
        boot = None
        for m in methods:
            if m in ("el", "et", "cu", "gmm"):
                f = fit if m == args.family else _fit(sample, system, m)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    ci = ci_invert(sample, system, m, args.level, fit=f)
                intervals[m] = ci.to_dict()
            else:
                if boot is None:
                    boot = bootstrap(sample, system, B=args.boot_B, mode="normal", seed=args.seed, level=args.level)
                if m == "bcn":
                    lo, hi = boot.interval
                else:
                    a = 1 - args.level
                    lo, hi = np.quantile(boot.replicates, [a / 2, 1 - a / 2], axis=0)
                intervals[m] = {"lower": float(lo[0]), "upper": float(hi[0]),
                                "estimate": float(boot.estimate[0]), "level": args.level,
                                "se_boot": float(boot.se[0])}
        first = intervals[methods[0]]
        results.append({
            "cell": cfg,
            "estimate": float(fit.theta[0]),
            "se": float(rep.se[0]),
            "omega_method": rep.omega_method,
            "interval": [first["lower"], first["upper"]],
            "intervals": intervals,
        })
    return {"command": "ci", "config": _resolved(args), "n": sample.n, "results": results}


def _parse_null(text: str) -> float:
    key, sep, value = text.partition("=")
    if not sep or key.strip() != "theta":
        raise ConfigError(f'--null must look like "theta=<value>"; got {text!r}')
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"--null value is not a number: {value!r}") from None


def cmd_test(args) -> dict:
    _check_ranges(args)
    theta0 = _parse_null(args.null)
    systems = _systems(args)
    if len(systems) != 1:
        raise ConfigError("test needs a single cell (give --tau1/--tau2, not --cuts)")
    sample = _load(args)
    cfg, system = systems[0]
    fit, rep = _point(sample, system, args)
    test = gel_ratio(sample, system, args.family, theta0, fit=fit, calibration=args.calibration, variance=rep)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ci = ci_invert(sample, system, args.family, args.level, fit=fit)
    return {
        "command": "test",
        "config": _resolved(args),
        "n": sample.n,
        "cell": cfg,
        "null": theta0,
        "estimate": float(fit.theta[0]),
        "se": float(rep.se[0]),
        "interval": [ci.lower, ci.upper],
        **test.to_dict(),
    }


def cmd_simulate(args) -> dict:
    from dataclasses import replace

    from .simulation import load_scenario, run_scenario, stderr_progress, write_tables

    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    except (ValueError, TypeError, KeyError, DesignError) as exc:
        raise ConfigError(f"malformed scenario: {exc}") from None
    overrides = {k: getattr(args, k) for k in ("M", "seed", "jobs", "level", "boot_B", "gamma_B")
                 if getattr(args, k) is not None}
    if args.methods is not None:
        overrides["methods"] = tuple(m.strip() for m in args.methods.split(","))
    try:
        scenario = replace(scenario, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    result = run_scenario(scenario, progress=None if args.quiet else stderr_progress)
    paths = write_tables(result, args.output)
    return {"command": "simulate", "config": scenario.to_dict(), "outputs": [str(p) for p in paths]}


COMMANDS = {"estimate": cmd_estimate, "ci": cmd_ci, "test": cmd_test, "simulate": cmd_simulate}


def _emit(report: dict, args) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if args.command != "simulate" and args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report = COMMANDS[args.command](args)
    except CSVFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConvergenceError, SingularMatrixError) as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ConfigError, DesignError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(report, args)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
