"""Finite populations, survey samples and CSV ingestion.

Inclusion probabilities are the canonical representation of a sample;
weights are exposed as the derived view ``1 / pi``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from ._validation import check_count, make_rng
from .exceptions import CSVFormatError, InvalidPopulationError

__all__ = [
    "UnitRecord",
    "FinitePopulation",
    "SurveySample",
    "ColumnMap",
    "generate_population",
    "assign_strata",
    "assign_clusters",
    "load_sample_csv",
    "write_sample_csv",
    "rescale_weights",
    "DESIGN_TAGS",
]

DESIGN_TAGS = (
    "SRSWOR",
    "Poisson",
    "SystematicPPS",
    "RaoSampfordPPS",
    "Stratified",
    "TwoStageCluster",
)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_partition(labels: np.ndarray, name: str) -> None:
    if labels.ndim != 1:
        raise InvalidPopulationError(f"{name} labels must be one-dimensional")
    if labels.size and labels.min() < 0:
        raise InvalidPopulationError(f"{name} labels must be nonnegative integers")


class UnitRecord(NamedTuple):
    id: int
    z: float
    x: float
    stratum: int | None
    cluster: int | None


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    """Columnar finite population of ``N`` labelled units.

    Parameters
    ----------
    z : array_like
        Study variable.
    x : array_like
        Strictly positive size measure used by the PPS designs.
    stratum, cluster : array_like of int, optional
        Labels partitioning the units.
    """

    z: np.ndarray
    x: np.ndarray
    stratum: np.ndarray | None = None
    cluster: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if z.shape != x.shape:
            raise InvalidPopulationError("z and x must have the same length")
        if z.size < 2:
            raise InvalidPopulationError(f"a population needs N >= 2 units; got {z.size}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x))):
            raise InvalidPopulationError("population values must be finite")
        if np.any(x <= 0):
            raise InvalidPopulationError("size measure x must be strictly positive")
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "x", _frozen(x))
        for name in ("stratum", "cluster"):
            lab = getattr(self, name)
            if lab is None:
                continue
            lab = np.asarray(lab).reshape(-1)
            if lab.shape != z.shape:
                raise InvalidPopulationError(f"{name} labels must have length N")
            lab = lab.astype(np.int64)
            _check_partition(lab, name)
            object.__setattr__(self, name, _frozen(lab, np.int64))

    @property
    def N(self) -> int:
        return int(self.z.size)

    @property
    def ids(self) -> np.ndarray:
        """Unit labels ``1..N``."""
        return np.arange(1, self.N + 1)

    def records(self) -> Iterator[UnitRecord]:
        for i in range(self.N):
            yield UnitRecord(
                i + 1,
                float(self.z[i]),
                float(self.x[i]),
                None if self.stratum is None else int(self.stratum[i]),
                None if self.cluster is None else int(self.cluster[i]),
            )

    def subset(self, index) -> "FinitePopulation":
        index = np.asarray(index)
        return FinitePopulation(
            self.z[index],
            self.x[index],
            None if self.stratum is None else self.stratum[index],
            None if self.cluster is None else self.cluster[index],
        )


@dataclass(frozen=True, eq=False)
class SurveySample:
    """A probability sample with first-order inclusion probabilities.

    Parameters
    ----------
    z : array_like
        Observed study values.
    pi : array_like
        Inclusion probabilities, strictly positive.  Values above one only
        arise from rescaled weights (see :func:`rescale_weights`).
    N : float
        Population size; for files without one it is estimated by the sum
        of the weights.
    design : str, optional
        One of :data:`DESIGN_TAGS`, or None when unknown.
    expected_n : float, optional
        The design's ``n_B``; defaults to the realized size.
    unit_id, stratum, cluster : array_like, optional
    strata_sizes : dict, optional
        Population size of each stratum, used to judge sampling fractions.
    """

    z: np.ndarray
    pi: np.ndarray
    N: float
    design: str | None = None
    expected_n: float | None = None
    unit_id: np.ndarray | None = None
    stratum: np.ndarray | None = None
    cluster: np.ndarray | None = None
    strata_sizes: dict | None = field(default=None)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(-1)
        pi = np.asarray(self.pi, dtype=float).reshape(-1)
        if z.size == 0:
            raise ValueError("a sample needs at least one row")
        if pi.shape != z.shape:
            raise ValueError("z and pi must have the same length")
        if not np.all(np.isfinite(z)):
            raise ValueError("sample values must be finite")
        if not np.all(np.isfinite(pi)) or np.any(pi <= 0):
            raise ValueError("inclusion probabilities must be finite and strictly positive")
        if self.design is not None and self.design not in DESIGN_TAGS:
            raise ValueError(f"unknown design tag {self.design!r}; expected one of {DESIGN_TAGS}")
        N = float(self.N)
        if not N > 0:
            raise ValueError("population size must be positive")
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "N", N)
        n_b = z.size if self.expected_n is None else float(self.expected_n)
        object.__setattr__(self, "expected_n", float(n_b))
        uid = np.arange(1, z.size + 1) if self.unit_id is None else self.unit_id
        uid = np.asarray(uid, dtype=np.int64).reshape(-1)
        if uid.shape != z.shape:
            raise ValueError("unit_id must have one entry per row")
        object.__setattr__(self, "unit_id", _frozen(uid, np.int64))
        for name in ("stratum", "cluster"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64).reshape(-1)
                if lab.shape != z.shape:
                    raise ValueError(f"{name} must have one entry per row")
                object.__setattr__(self, name, _frozen(lab, np.int64))
        if self.strata_sizes is not None:
            object.__setattr__(
                self, "strata_sizes", {int(k): float(v) for k, v in self.strata_sizes.items()}
            )

    @property
    def n(self) -> int:
        return int(self.z.size)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.pi

    @property
    def N_hat(self) -> float:
        return float(np.sum(1.0 / self.pi))

    @property
    def f_N(self) -> float:
        """Scaling ``n_B / N`` of the dual criterion."""
        return self.expected_n / self.N

    def take(self, index) -> "SurveySample":
        """Rows ``index`` (possibly repeated) with design metadata kept."""
        index = np.asarray(index)
        return replace(
            self,
            z=self.z[index],
            pi=self.pi[index],
            unit_id=self.unit_id[index],
            stratum=None if self.stratum is None else self.stratum[index],
            cluster=None if self.cluster is None else self.cluster[index],
        )


def generate_population(N: int, seed=None) -> FinitePopulation:
    """Simulate ``z = x + e`` with ``x = 0.25 + Weibull(2, 2)`` and ``e ~ chi2_3``.

    The Weibull draw uses shape 2 and scale 2 via the inverse CDF,
    ``x = 0.25 + 2 (-log U)^{1/2}``, and ``e`` is a sum of three squared
    standard normals.

    Parameters
    ----------
    N : int
        Population size, at least 2.
    seed : int, SeedSequence or Generator, optional

    Returns
    -------
    FinitePopulation
    """
    if isinstance(N, bool) or not isinstance(N, (int, np.integer)) or N < 2:
        raise InvalidPopulationError(f"N must be an integer >= 2; got {N!r}")
    rng = make_rng(seed)
    u = rng.random(N)
    # 1 - u lies in (0, 1], so the log is finite
    x = 0.25 + 2.0 * np.sqrt(-np.log1p(-u))
    e = np.sum(rng.standard_normal((N, 3)) ** 2, axis=1)
    return FinitePopulation(z=x + e, x=x)


def _block_labels(sizes, N: int, what: str) -> np.ndarray:
    sizes = [check_count(int(s), f"{what} size") for s in sizes]
    if sum(sizes) != N:
        raise InvalidPopulationError(f"{what} sizes sum to {sum(sizes)}, population has N={N}")
    return np.repeat(np.arange(1, len(sizes) + 1), sizes)


def assign_strata(pop: FinitePopulation, sizes) -> FinitePopulation:
    """Label consecutive blocks of units as strata ``1..H`` of the given sizes."""
    return replace(pop, stratum=_block_labels(sizes, pop.N, "stratum"))


def assign_clusters(pop: FinitePopulation, sizes) -> FinitePopulation:
    """Label consecutive blocks of units as clusters ``1..K`` of the given sizes."""
    return replace(pop, cluster=_block_labels(sizes, pop.N, "cluster"))


@dataclass(frozen=True)
class ColumnMap:
    """Names of the CSV columns; ``weight`` and ``pi`` are alternatives."""

    z: str = "z"
    weight: str = "weight"
    pi: str = "pi"
    stratum: str = "stratum"
    cluster: str = "cluster"
    id: str = "id"


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(f"line {line}: column {column!r} has non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise CSVFormatError(f"line {line}: column {column!r} is not finite ({text!r})")
    return value


def _parse_int(text: str, column: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise CSVFormatError(f"line {line}: column {column!r} must be an integer, got {text!r}") from None


def load_sample_csv(
    path,
    schema: ColumnMap | None = None,
    *,
    population_size: float | None = None,
    rescale: bool = False,
    design: str | None = None,
) -> SurveySample:
    """Read a weighted sample from a comma-separated file with a header row.

    Parameters
    ----------
    path : str or Path
    schema : ColumnMap, optional
        Column names; the defaults are ``z``, ``weight``/``pi``,
        ``stratum``, ``cluster`` and ``id``.
    population_size : float, optional
        Known ``N``.  When omitted, ``N`` is estimated by the weight sum.
    rescale : bool, default False
        Apply :func:`rescale_weights` after loading.
    design : str, optional
        Design tag to attach.

    Raises
    ------
    CSVFormatError
        Missing columns, empty file, unparseable or nonpositive entries.
        Messages name the offending line (the header is line 1).
    """
    schema = schema or ColumnMap()
    path = Path(path)
    if not path.exists():
        raise CSVFormatError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CSVFormatError(f"{path}: file is empty") from None
        col = {name: j for j, name in enumerate(header)}
        if schema.z not in col:
            raise CSVFormatError(f"{path}: missing required column {schema.z!r}")
        if schema.weight in col:
            wcol, is_weight = schema.weight, True
        elif schema.pi in col:
            wcol, is_weight = schema.pi, False
        else:
            raise CSVFormatError(
                f"{path}: missing weight column; need {schema.weight!r} or {schema.pi!r}"
            )
        opt = {k: col.get(getattr(schema, k)) for k in ("stratum", "cluster", "id")}
        z, w, lab = [], [], {k: [] for k in opt}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVFormatError(
                    f"line {line}: expected {len(header)} fields, found {len(row)}"
                )
            z.append(_parse_float(row[col[schema.z]], schema.z, line))
            value = _parse_float(row[col[wcol]], wcol, line)
            if value <= 0:
                raise CSVFormatError(f"line {line}: column {wcol!r} must be positive, got {value}")
            if not is_weight and value > 1:
                raise CSVFormatError(f"line {line}: inclusion probability {value} exceeds 1")
            w.append(value)
            for k, j in opt.items():
                if j is not None:
                    lab[k].append(_parse_int(row[j], getattr(schema, k), line))
    if not z:
        raise CSVFormatError(f"{path}: no data rows")
    w = np.asarray(w)
    pi = 1.0 / w if is_weight else w
    N = float(np.sum(1.0 / pi)) if population_size is None else float(population_size)
    sample = SurveySample(
        z=np.asarray(z),
        pi=pi,
        N=N,
        design=design,
        unit_id=np.asarray(lab["id"]) if opt["id"] is not None else None,
        stratum=np.asarray(lab["stratum"]) if opt["stratum"] is not None else None,
        cluster=np.asarray(lab["cluster"]) if opt["cluster"] is not None else None,
    )
    return rescale_weights(sample) if rescale else sample


def write_sample_csv(sample: SurveySample, path, *, as_weights: bool = False) -> None:
    """Write ``sample`` in the schema read by :func:`load_sample_csv`.

    Floats are written with ``repr`` so a reload reproduces them exactly.
    """
    cols = ["id", "z", "weight" if as_weights else "pi"]
    if sample.stratum is not None:
        cols.append("stratum")
    if sample.cluster is not None:
        cols.append("cluster")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        vals = sample.weights if as_weights else sample.pi
        for i in range(sample.n):
            row = [int(sample.unit_id[i]), repr(float(sample.z[i])), repr(float(vals[i]))]
            if sample.stratum is not None:
                row.append(int(sample.stratum[i]))
            if sample.cluster is not None:
                row.append(int(sample.cluster[i]))
            writer.writerow(row)


def rescale_weights(sample: SurveySample) -> SurveySample:
    """Rescale weights to ``w_i = n w~_i / sum_j w~_j`` so they sum to ``n``.

    The population size becomes ``n`` as well, which keeps ``N_hat / N = 1``.
    Ratio estimators such as the inequality measures are unaffected.
    """
    w = sample.weights
    w_new = sample.n * w / np.sum(w)
    return replace(sample, pi=1.0 / w_new, N=float(sample.n), expected_n=float(sample.n))
