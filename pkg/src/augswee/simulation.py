"""Monte Carlo harness for interval coverage under designs A-D.

Seeds: ``SeedSequence(seed).spawn(2)`` gives one stream for the population
and one parent for the replicates; replicate ``m`` uses the ``m``-th child of
that parent.  Results therefore do not depend on the number of workers.
"""
from __future__ import annotations

import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .designs import DesignSpec, draw
from .estfun import census_solve, quantile_share_system
from .gel import fit_gel, fit_gmm
from .inference import ci_invert
from .population import FinitePopulation, assign_clusters, assign_strata, generate_population
from .variance import bootstrap, variance_report

__all__ = [
    "Scenario",
    "MetricsRow",
    "ReplicateRecord",
    "ScenarioResult",
    "metrics",
    "preset_scenario",
    "build_population",
    "run_scenario",
    "write_tables",
    "load_scenario",
    "METHODS",
    "SHARE_CELLS",
]

METHODS = ("EL", "ET", "CU", "GMM", "BCn", "BCp")
SHARE_CELLS = ((0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))
CI_TABLE = {"A": "table2.csv", "B": "table3.csv", "C": "table4.csv", "D": "table5.csv"}
FAILURE_LIMIT = 0.02


@dataclass(frozen=True)
class Scenario:
    """One simulation configuration.

    Parameters
    ----------
    name : str
    N : int
        Population size.
    design : DesignSpec
    strata_sizes, cluster_sizes : tuple of int, optional
        Consecutive blocks of the generated population labelled as strata
        or clusters.
    cells : tuple of (tau1, tau2)
    methods : tuple of str
        Subset of :data:`METHODS`.
    augmented : bool
        Run the augmented equations.
    conventional : bool
        Also run the conventional (unaugmented) equations.
    M, seed, level, boot_B, gamma_B, omega, jobs
    tag : str
        ``A``-``D`` for the preset designs, ``custom`` otherwise.
    """

    name: str
    N: int
    design: DesignSpec
    strata_sizes: tuple | None = None
    cluster_sizes: tuple | None = None
    cells: tuple = SHARE_CELLS
    methods: tuple = ("EL",)
    augmented: bool = True
    conventional: bool = False
    M: int = 1000
    seed: int = 2024
    level: float = 0.95
    boot_B: int = 500
    gamma_B: int = 200
    omega: str = "auto"
    jobs: int = 1
    tag: str = "custom"

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; valid methods are {list(METHODS)}")
        if not (self.augmented or self.conventional):
            raise ValueError("at least one of augmented / conventional must be selected")
        object.__setattr__(self, "cells", tuple((float(a), float(b)) for a, b in self.cells))
        object.__setattr__(self, "methods", tuple(self.methods))
        for name in ("strata_sizes", "cluster_sizes"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(x) for x in v))

    @property
    def variants(self) -> tuple:
        return tuple(v for v, on in (("augmented", self.augmented), ("conventional", self.conventional)) if on)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["design"] = self.design.to_dict()
        out["cells"] = [list(c) for c in self.cells]
        out["methods"] = list(self.methods)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        if not isinstance(data, dict):
            raise ValueError("scenario must be a JSON object")
        data = dict(data)
        if "preset" in data:
            preset = data.pop("preset")
            return preset_scenario(preset, **data)
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        for key in ("name", "N", "design"):
            if key not in data:
                raise ValueError(f"scenario is missing {key!r}")
        data["design"] = DesignSpec.from_dict(data["design"])
        return cls(**data)


def preset_scenario(tag: str, **overrides) -> Scenario:
    """Designs A-D of the simulation study.

    A: systematic PPS, N = 20000, n = 300.
    B: Rao-Sampford PPS, N = 3000, n = 300.
    C: stratified Rao-Sampford, strata (4000, 6000, 10000), n_h = (50, 100, 150).
    D: two-stage cluster, 1350 clusters (200 of 30, 250 of 20, 900 of 10), k = 60, m = 5.
    """
    tag = str(tag).upper()
    rs = lambda n: DesignSpec("RaoSampfordPPS", n=n)
    presets = {
        "A": dict(N=20000, design=DesignSpec("SystematicPPS", n=300)),
        "B": dict(N=3000, design=DesignSpec("RaoSampfordPPS", n=300)),
        "C": dict(
            N=20000,
            design=DesignSpec("Stratified", strata=((1, rs(50)), (2, rs(100)), (3, rs(150)))),
            strata_sizes=(4000, 6000, 10000),
        ),
        "D": dict(
            N=20000,
            design=DesignSpec("TwoStageCluster", k=60, m=5),
            cluster_sizes=(30,) * 200 + (20,) * 250 + (10,) * 900,
        ),
    }
    if tag not in presets:
        raise ValueError(f"unknown preset design {tag!r}; expected A, B, C or D")
    base = dict(name=f"design{tag}", tag=tag, **presets[tag])
    if "design" in overrides and isinstance(overrides["design"], dict):
        overrides["design"] = DesignSpec.from_dict(overrides["design"])
    base.update(overrides)
    return Scenario(**base)


def load_scenario(path) -> Scenario:
    """Read a scenario JSON file; bare names such as ``designA.json`` fall back
    to the copies bundled with the package."""
    p = Path(path)
    if not p.exists():
        bundled = Path(__file__).parent / "scenarios" / p.name
        if not bundled.exists():
            raise FileNotFoundError(f"scenario file not found: {path}")
        p = bundled
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{p}: invalid JSON ({exc})") from None
    return Scenario.from_dict(data)


def _streams(seed: int, M: int):
    pop_seq, rep_seq = np.random.SeedSequence(seed).spawn(2)
    return pop_seq, rep_seq.spawn(M)


def build_population(scenario: Scenario) -> FinitePopulation:
    pop_seq, _ = _streams(scenario.seed, 1)
    pop = generate_population(scenario.N, np.random.default_rng(pop_seq))
    if scenario.strata_sizes:
        pop = assign_strata(pop, scenario.strata_sizes)
    if scenario.cluster_sizes:
        pop = assign_clusters(pop, scenario.cluster_sizes)
    return pop


@dataclass(frozen=True)
class ReplicateRecord:
    lower: float
    upper: float
    estimate: float
    se: float = math.nan


@dataclass(frozen=True)
class MetricsRow:
    """Coverage summary of one (variant, method, cell).

    ``LE = mean(theta_N <= L)``, ``CP = mean(L < theta_N < U)``,
    ``UE = mean(theta_N >= U)`` (counted only when not already in ``LE``,
    so the three always sum to one) and ``AL = mean(U - L)``.
    """

    LE: float
    CP: float
    UE: float
    AL: float
    bias: float
    SD: float
    SE_mean: float
    M: int
    failures: int = 0
    valid: bool = True


def metrics(records, theta_N: float, failures: int = 0) -> MetricsRow:
    """Aggregate replicate records against the census value ``theta_N``."""
    records = list(records)
    M = len(records)
    if M == 0:
        nan = math.nan
        return MetricsRow(nan, nan, nan, nan, nan, nan, nan, 0, failures, False)
    L = np.array([r.lower for r in records])
    U = np.array([r.upper for r in records])
    est = np.array([r.estimate for r in records])
    se = np.array([r.se for r in records])
    le = theta_N <= L
    cp = (L < theta_N) & (theta_N < U)
    ue = (theta_N >= U) & ~le
    n_le, n_cp = int(le.sum()), int(cp.sum())
    n_ue = M - n_le - n_cp
    assert n_ue == int(ue.sum())
    total = M + failures
    return MetricsRow(
        LE=n_le / M,
        CP=n_cp / M,
        UE=n_ue / M,
        AL=float(np.mean(U - L)),
        bias=float(np.mean(est) - theta_N),
        SD=float(np.std(est, ddof=1)) if M > 1 else 0.0,
        SE_mean=float(np.nanmean(se)) if np.any(np.isfinite(se)) else math.nan,
        M=M,
        failures=failures,
        valid=failures <= FAILURE_LIMIT * total,
    )


def _system(cell, variant):
    return quantile_share_system(cell[0], cell[1], augmented=(variant == "augmented"))


def _one_replicate(pop: FinitePopulation, scenario: Scenario, seq: np.random.SeedSequence) -> dict:
    rng = np.random.default_rng(seq)
    sample = draw(pop, scenario.design, rng)
    out = {}
    for variant in scenario.variants:
        for cell in scenario.cells:
            system = _system(cell, variant)
            phi = system.fit_nuisance(sample)
            key = (variant, cell)
            try:
                base = fit_gel(sample, system, "el", phi=phi)
                rep = variance_report(sample, system, base, omega=scenario.omega,
                                      gamma_B=scenario.gamma_B, seed=rng)
                out[key + ("point",)] = (float(base.theta[0]), float(rep.se[0]))
            except Exception as exc:  # recorded, not raised
                out[key + ("point",)] = exc
            boot = None
            for method in scenario.methods:
                try:
                    if method in ("EL", "ET", "CU"):
                        fit = fit_gel(sample, system, method.lower(), phi=phi)
                        if not fit.converged:
                            raise RuntimeError(fit.message)
                        ci = ci_invert(sample, system, method.lower(), scenario.level, fit=fit)
                        out[key + (method,)] = (ci.lower, ci.upper, ci.estimate)
                    elif method == "GMM":
                        fit = fit_gmm(sample, system, phi=phi)
                        ci = ci_invert(sample, system, "gmm", scenario.level, fit=fit)
                        out[key + (method,)] = (ci.lower, ci.upper, ci.estimate)
                    else:
                        if boot is None:
                            boot = bootstrap(sample, system, B=scenario.boot_B, mode="normal",
                                             seed=rng, level=scenario.level)
                        if method == "BCn":
                            lo, hi = boot.interval
                        else:
                            a = 1 - scenario.level
                            lo = np.quantile(boot.replicates, a / 2, axis=0)
                            hi = np.quantile(boot.replicates, 1 - a / 2, axis=0)
                        out[key + (method,)] = (float(lo[0]), float(hi[0]), float(boot.estimate[0]))
                except Exception as exc:
                    out[key + (method,)] = exc
    return out


@dataclass
class ScenarioResult:
    scenario: Scenario
    theta_N: dict
    ci: dict  # (variant, method, cell) -> MetricsRow
    point: dict  # (variant, cell) -> MetricsRow (LE/CP/UE/AL unused)
    meta: dict = field(default_factory=dict)

    def row(self, method: str, cell, variant: str = "augmented") -> MetricsRow:
        return self.ci[(variant, method, tuple(map(float, cell)))]


def run_scenario(scenario: Scenario, progress=None) -> ScenarioResult:
    """Run ``M`` replicates of draw, fit and interval for every cell and method.

    Parameters
    ----------
    progress : callable, optional
        Called as ``progress(done, total)``.
    """
    t0 = time.perf_counter()
    pop = build_population(scenario)
    theta_N = {cell: float(census_solve(pop, _system(cell, "augmented"))[0]) for cell in scenario.cells}
    _, seqs = _streams(scenario.seed, scenario.M)
    if scenario.jobs != 1:
        from joblib import Parallel, delayed

        reps = Parallel(n_jobs=scenario.jobs)(delayed(_one_replicate)(pop, scenario, s) for s in seqs)
    else:
        reps = []
        for m, s in enumerate(seqs):
            reps.append(_one_replicate(pop, scenario, s))
            if progress is not None:
                progress(m + 1, scenario.M)
    ci, point, fail_log = {}, {}, {}
    for variant in scenario.variants:
        for cell in scenario.cells:
            pts = [r[(variant, cell, "point")] for r in reps]
            good = [p for p in pts if not isinstance(p, Exception)]
            recs = [ReplicateRecord(e, e, e, s) for e, s in good]
            point[(variant, cell)] = metrics(recs, theta_N[cell], len(pts) - len(good))
            for method in scenario.methods:
                vals = [r[(variant, cell, method)] for r in reps]
                errs = [v for v in vals if isinstance(v, Exception)]
                recs = [ReplicateRecord(*v) for v in vals if not isinstance(v, Exception)]
                ci[(variant, method, cell)] = metrics(recs, theta_N[cell], len(errs))
                if errs:
                    fail_log[f"{variant}/{method}/{cell}"] = sorted({repr(e)[:200] for e in errs})
    meta = {
        "scenario": scenario.to_dict(),
        "population_seed_rule": "SeedSequence(seed).spawn(2)[0]",
        "replicate_seed_rule": "SeedSequence(seed).spawn(2)[1].spawn(M)[m]",
        "theta_N": {str(list(c)): v for c, v in theta_N.items()},
        "runtime_seconds": time.perf_counter() - t0,
        "failures": {f"{k[0]}/{k[1]}/{list(k[2])}": v.failures for k, v in ci.items()},
        "failure_messages": fail_log,
    }
    return ScenarioResult(scenario, theta_N, ci, point, meta)


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_tables(result: ScenarioResult, outdir) -> list:
    """Write ``table1.csv`` (point estimation), the interval table of the
    design (``table2.csv`` ... ``table5.csv``, or ``table_ci.csv`` for custom
    designs), ``results.json`` and ``meta.json``.  Returns the written paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    sc = result.scenario
    cells = sc.cells
    label = lambda c: f"({c[0]:g},{c[1]:g})"
    written = []
    p1 = out / "table1.csv"
    with p1.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design", "variant"] + [f"{s}{label(c)}" for c in cells for s in ("bias", "SD", "SE")])
        for variant in sc.variants:
            row = [sc.tag, variant]
            for c in cells:
                m = result.point[(variant, c)]
                row += [_fmt(m.bias), _fmt(m.SD), _fmt(m.SE_mean)]
            w.writerow(row)
    written.append(p1)
    p2 = out / CI_TABLE.get(sc.tag, "table_ci.csv")
    with p2.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design", "variant", "method"] + [f"{s}{label(c)}" for c in cells for s in ("LE", "CP", "UE", "AL")])
        for variant in sc.variants:
            for method in sc.methods:
                row = [sc.tag, variant, method]
                for c in cells:
                    m = result.ci[(variant, method, c)]
                    vals = [m.LE, m.CP, m.UE, m.AL] if m.valid else [math.nan] * 4
                    row += [_fmt(v) for v in vals]
                w.writerow(row)
    written.append(p2)
    long = []
    for (variant, method, c), m in sorted(result.ci.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        long.append({"variant": variant, "method": method, "cell": list(c), "theta_N": result.theta_N[c], **asdict(m)})
    pr = out / "results.json"
    pr.write_text(json.dumps({"intervals": long, "point": [
        {"variant": v, "cell": list(c), "theta_N": result.theta_N[c], **asdict(m)}
        for (v, c), m in result.point.items()
    ]}, indent=2, sort_keys=True))
    written.append(pr)
    pm = out / "meta.json"
    pm.write_text(json.dumps(result.meta, indent=2, sort_keys=True, default=str))
    written.append(pm)
    return written


def stderr_progress(done: int, total: int) -> None:
    step = max(1, total // 20)
    if done % step == 0 or done == total:
        print(f"replicate {done}/{total}", file=sys.stderr, flush=True)
