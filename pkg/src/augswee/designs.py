"""Probability sampling designs with exact first-order inclusion probabilities.

Every sampler takes a :class:`FinitePopulation` and a seed, and returns a
:class:`SurveySample` whose ``pi`` are the analytic inclusion probabilities of
the design (never estimated).  Seeds may be ints, ``SeedSequence`` objects or
``Generator`` instances.  Composite designs split their seed with
``SeedSequence.spawn`` so that each stratum gets its own stream.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from ._validation import check_count, make_rng
from .exceptions import DesignError, RetryBudgetExceeded
from .population import FinitePopulation, SurveySample

__all__ = [
    "DesignSpec",
    "draw",
    "draw_srswor",
    "draw_poisson",
    "draw_systematic_pps",
    "draw_rao_sampford_pps",
    "draw_stratified",
    "draw_two_stage_cluster",
    "pps_probabilities",
    "RETRY_BUDGET",
]

RETRY_BUDGET = 10**6

_KIND_ALIASES = {
    "srswor": "SRSWOR",
    "srs": "SRSWOR",
    "poisson": "Poisson",
    "systematicpps": "SystematicPPS",
    "systematic_pps": "SystematicPPS",
    "raosampfordpps": "RaoSampfordPPS",
    "rao_sampford": "RaoSampfordPPS",
    "rao_sampford_pps": "RaoSampfordPPS",
    "stratified": "Stratified",
    "twostagecluster": "TwoStageCluster",
    "two_stage_cluster": "TwoStageCluster",
}


def _canonical_kind(kind: str) -> str:
    key = str(kind).strip().lower()
    if key not in _KIND_ALIASES:
        raise DesignError(f"unknown design kind {kind!r}")
    return _KIND_ALIASES[key]


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class DesignSpec:
    """Serializable description of a sampling design.

    Parameters
    ----------
    kind : str
        ``SRSWOR``, ``Poisson``, ``SystematicPPS``, ``RaoSampfordPPS``,
        ``Stratified`` or ``TwoStageCluster``.
    n : int, optional
        Target sample size (expected size for ``Poisson``, whose
        probabilities are proportional to ``x``).
    strata : tuple of (int, DesignSpec), optional
        Per-stratum inner designs for ``Stratified``.
    k, m : int, optional
        PSU count and per-PSU take for ``TwoStageCluster``.
    """

    kind: str
    n: int | None = None
    strata: tuple = field(default=())
    k: int | None = None
    m: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", _canonical_kind(self.kind))
        object.__setattr__(self, "strata", tuple((int(h), s) for h, s in self.strata))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.n is not None:
            out["n"] = self.n
        if self.strata:
            out["strata"] = [{"stratum": h, "design": s.to_dict()} for h, s in self.strata]
        if self.k is not None:
            out["k"] = self.k
        if self.m is not None:
            out["m"] = self.m
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DesignSpec":
        if not isinstance(data, dict) or "kind" not in data:
            raise DesignError("design config must be an object with a 'kind' field")
        unknown = set(data) - {"kind", "n", "strata", "k", "m"}
        if unknown:
            raise DesignError(f"unknown design fields: {sorted(unknown)}")
        strata = tuple(
            (int(item["stratum"]), cls.from_dict(item["design"])) for item in data.get("strata", ())
        )
        return cls(kind=data["kind"], n=data.get("n"), strata=strata, k=data.get("k"), m=data.get("m"))


def draw(pop: FinitePopulation, spec: DesignSpec, seed=None) -> SurveySample:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "SRSWOR":
        return draw_srswor(pop, spec.n, seed)
    if spec.kind == "Poisson":
        n = check_count(spec.n, "n")
        return draw_poisson(pop, pps_probabilities(pop.x, n, strict=False), seed)
    if spec.kind == "SystematicPPS":
        return draw_systematic_pps(pop, spec.n, seed)
    if spec.kind == "RaoSampfordPPS":
        return draw_rao_sampford_pps(pop, spec.n, seed)
    if spec.kind == "Stratified":
        return draw_stratified(pop, spec.strata, seed)
    if spec.kind == "TwoStageCluster":
        return draw_two_stage_cluster(pop, spec.k, spec.m, seed)
    raise DesignError(f"unsupported kind {spec.kind}")  # pragma: no cover


def pps_probabilities(x, n: int, *, strict: bool = False) -> np.ndarray:
    """Return ``n x_i / sum x`` after checking there are no certainty units.

    Raises
    ------
    DesignError
        If some ``n x_i / sum x`` exceeds one (or reaches it when ``strict``).
    """
    x = np.asarray(x, dtype=float)
    pi = n * x / x.sum()
    bad = np.flatnonzero(pi >= 1.0) if strict else np.flatnonzero(pi > 1.0 + 1e-12)
    if bad.size:
        shown = ", ".join(str(i + 1) for i in bad[:10])
        more = "" if bad.size <= 10 else f" and {bad.size - 10} more"
        rel = ">= 1" if strict else "> 1"
        raise DesignError(f"certainty units with n*x_i/sum(x) {rel}: unit(s) {shown}{more}")
    return np.minimum(pi, 1.0)


def _check_n(n, N: int) -> int:
    n = check_count(n, "n")
    if n > N:
        raise DesignError(f"sample size n={n} exceeds population size N={N}")
    return n


def _make_sample(pop, idx, pi, design, expected_n=None) -> SurveySample:
    idx = np.asarray(idx, dtype=np.int64)
    return SurveySample(
        z=pop.z[idx],
        pi=pi[idx],
        N=pop.N,
        design=design,
        expected_n=expected_n,
        unit_id=idx + 1,
        stratum=None if pop.stratum is None else pop.stratum[idx],
        cluster=None if pop.cluster is None else pop.cluster[idx],
    )


def draw_srswor(pop: FinitePopulation, n: int, seed=None) -> SurveySample:
    """Simple random sampling without replacement, ``pi = n / N``."""
    n = _check_n(n, pop.N)
    rng = make_rng(seed)
    idx = np.sort(rng.choice(pop.N, size=n, replace=False))
    return _make_sample(pop, idx, np.full(pop.N, n / pop.N), "SRSWOR")


def draw_poisson(pop: FinitePopulation, pi, seed=None) -> SurveySample:
    """Independent Bernoulli(``pi_i``) inclusion; ``n_B = sum pi``.

    An empty realization is redrawn, since a sample needs at least one row.
    """
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if pi.shape[0] != pop.N:
        raise DesignError(f"need {pop.N} probabilities, got {pi.shape[0]}")
    if not np.all(np.isfinite(pi)) or np.any(pi <= 0) or np.any(pi > 1):
        raise DesignError("Poisson probabilities must lie in (0, 1]")
    rng = make_rng(seed)
    for _ in range(RETRY_BUDGET):
        idx = np.flatnonzero(rng.random(pop.N) < pi)
        if idx.size:
            return _make_sample(pop, idx, pi, "Poisson", expected_n=float(pi.sum()))
    raise RetryBudgetExceeded("Poisson draws were empty for the whole retry budget")


def _systematic(pi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Linear systematic selection on a random permutation; ``sum pi`` must be integral."""
    N = pi.size
    n = int(round(pi.sum()))
    perm = rng.permutation(N)
    cum = np.cumsum(pi[perm])
    points = rng.random() + np.arange(n)
    pos = np.minimum(np.searchsorted(cum, points, side="left"), N - 1)
    return np.sort(perm[pos])


def draw_systematic_pps(pop: FinitePopulation, n: int, seed=None) -> SurveySample:
    """Randomized systematic PPS without replacement, ``pi_i = n x_i / sum x``.

    Units are put in random order, their probabilities are cumulated on
    ``[0, n)`` and the points ``u, u + 1, ..., u + n - 1`` with
    ``u ~ U(0, 1)`` select the units whose intervals contain them.
    """
    n = _check_n(n, pop.N)
    pi = pps_probabilities(pop.x, n)
    idx = _systematic(pi, make_rng(seed))
    return _make_sample(pop, idx, pi, "SystematicPPS")


def _sampford_log_acceptance(pi: np.ndarray) -> float:
    # Poisson approximation to P(no repeated unit among the n - 1 later draws)
    n = pi.sum()
    lam = pi / (1 - pi)
    q = lam / lam.sum()
    return -0.5 * n * (n - 1) * float(np.sum(q**2))


def _rao_sampford_rejective(pi, rng, budget):
    N, n = pi.size, int(round(pi.sum()))
    p_first = pi / pi.sum()
    lam = pi / (1 - pi)
    q = lam / lam.sum()
    for _ in range(budget):
        first = rng.choice(N, p=p_first)
        rest = rng.choice(N, size=n - 1, p=q)
        idx = np.append(rest, first)
        if np.unique(idx).size == n:
            return np.sort(idx)
    return None


def _rao_sampford_conditional_poisson(pi, rng, budget):
    """Sampford's design via a conditional Poisson proposal.

    A Poisson sample with odds proportional to ``pi / (1 - pi)`` conditioned
    on size ``n`` has probability proportional to ``prod(lambda_i)``.
    Accepting it with probability ``sum_{i in s}(1 - pi_i) / n`` yields
    Sampford's ``p(s)`` proportional to ``prod(lambda_i) sum(1 - pi_i)``.
    """
    N, n = pi.size, int(round(pi.sum()))
    lam = pi / (1 - pi)

    def excess(logc):
        c = np.exp(logc)
        return np.sum(c * lam / (1 + c * lam)) - n

    logc = brentq(excess, -50.0, 50.0, xtol=1e-12)
    c = math.exp(logc)
    p = c * lam / (1 + c * lam)
    batch = max(8, int(8 * math.sqrt(n)))
    tries = 0
    while tries < budget:
        hits = rng.random((batch, N)) < p
        sizes = hits.sum(axis=1)
        accept_u = rng.random(batch)
        for b in np.flatnonzero(sizes == n):
            idx = np.flatnonzero(hits[b])
            if accept_u[b] * n <= np.sum(1 - pi[idx]):
                return idx
        tries += batch
    return None


def draw_rao_sampford_pps(
    pop: FinitePopulation, n: int, seed=None, *, method: str = "auto", budget: int = RETRY_BUDGET
) -> SurveySample:
    """Rao-Sampford PPS without replacement, ``pi_i = n x_i / sum x``.

    Parameters
    ----------
    method : {"auto", "rejective", "conditional_poisson"}
        ``rejective`` is the textbook scheme: one draw with probabilities
        ``x_i / sum x`` and ``n - 1`` draws proportional to
        ``pi_i / (1 - pi_i)``, rejected whenever a unit repeats.
        ``conditional_poisson`` produces the same design through a
        size-conditioned Poisson proposal and stays efficient at large
        sampling fractions where the textbook scheme almost never accepts.
        ``auto`` uses the textbook scheme while its acceptance rate is
        above about 1%.
    budget : int
        Maximum number of rejected proposals.
    """
    n = _check_n(n, pop.N)
    pi = pps_probabilities(pop.x, n, strict=True) if n < pop.N else None
    if pi is None:
        raise DesignError("Rao-Sampford needs n < N (every pi must be below 1)")
    rng = make_rng(seed)
    if method == "auto":
        method = "rejective" if _sampford_log_acceptance(pi) > math.log(0.01) else "conditional_poisson"
    if method == "rejective":
        idx = _rao_sampford_rejective(pi, rng, budget) if n > 1 else np.array([rng.choice(pop.N, p=pi)])
    elif method == "conditional_poisson":
        idx = _rao_sampford_conditional_poisson(pi, rng, budget)
    else:
        raise DesignError(f"unknown Rao-Sampford method {method!r}")
    if idx is None:
        raise RetryBudgetExceeded(
            f"Rao-Sampford ({method}) rejected {budget} proposals; N={pop.N}, n={n}, "
            f"max pi={pi.max():.4f}, estimated log acceptance {_sampford_log_acceptance(pi):.2f}"
        )
    return _make_sample(pop, idx, pi, "RaoSampfordPPS")


def draw_stratified(pop: FinitePopulation, per_stratum, seed=None) -> SurveySample:
    """Independent inner designs within strata.

    Parameters
    ----------
    per_stratum : sequence of (int, DesignSpec)
        Inner design for each stratum label; every stratum present in the
        population must be listed.
    """
    if pop.stratum is None:
        raise DesignError("population has no stratum labels")
    per_stratum = list(per_stratum)
    labels = np.unique(pop.stratum)
    given = [int(h) for h, _ in per_stratum]
    unknown = sorted(set(given) - set(labels.tolist()))
    if unknown:
        raise DesignError(f"unknown stratum id(s): {unknown}")
    missing = sorted(set(labels.tolist()) - set(given))
    if missing:
        raise DesignError(f"no design given for stratum id(s): {missing}")
    if len(set(given)) != len(given):
        raise DesignError("duplicate stratum ids in stratified design")
    streams = _seed_sequence(seed).spawn(len(per_stratum))
    parts, sizes = [], {}
    for (h, inner), stream in zip(per_stratum, streams):
        if inner.kind in ("Stratified", "TwoStageCluster"):
            raise DesignError(f"stratum {h}: inner design must be single-stage")
        members = np.flatnonzero(pop.stratum == h)
        sizes[int(h)] = float(members.size)
        try:
            sub = draw(pop.subset(members), inner, np.random.default_rng(stream))
        except DesignError as exc:
            raise type(exc)(f"stratum {h}: {exc}") from exc
        except Exception as exc:  # population-level validation, e.g. N_h < 2
            raise DesignError(f"stratum {h}: {exc}") from exc
        parts.append((members[sub.unit_id - 1], sub))
    idx = np.concatenate([m for m, _ in parts])
    return SurveySample(
        z=pop.z[idx],
        pi=np.concatenate([s.pi for _, s in parts]),
        N=pop.N,
        design="Stratified",
        expected_n=float(sum(s.expected_n for _, s in parts)),
        unit_id=idx + 1,
        stratum=pop.stratum[idx],
        cluster=None if pop.cluster is None else pop.cluster[idx],
        strata_sizes=sizes,
    )


def draw_two_stage_cluster(pop: FinitePopulation, k: int, m: int, seed=None) -> SurveySample:
    """Self-weighting two-stage design.

    ``k`` PSUs are drawn by randomized systematic PPS on the cluster sizes
    ``M_i`` and ``m`` elements by SRSWOR within each, so every element has
    ``pi = (k M_i / N)(m / M_i) = k m / N``.
    """
    if pop.cluster is None:
        raise DesignError("population has no cluster labels")
    labels, sizes = np.unique(pop.cluster, return_counts=True)
    k = check_count(k, "k")
    m = check_count(m, "m")
    if k > labels.size:
        raise DesignError(f"k={k} exceeds the number of clusters ({labels.size})")
    if m > sizes.min():
        raise DesignError(f"m={m} exceeds the smallest cluster size ({sizes.min()})")
    pi1 = k * sizes / pop.N
    if np.any(pi1 > 1 + 1e-12):
        bad = labels[pi1 > 1 + 1e-12][:10].tolist()
        raise DesignError(f"clusters with k*M_i/N > 1: {bad}")
    rng = make_rng(seed)
    chosen = _systematic(np.minimum(pi1, 1.0), rng)
    idx = []
    for c in chosen:
        members = np.flatnonzero(pop.cluster == labels[c])
        idx.append(np.sort(rng.choice(members, size=m, replace=False)))
    idx = np.concatenate(idx)
    pi = np.full(pop.N, k * m / pop.N)
    return _make_sample(pop, idx, pi, "TwoStageCluster")
