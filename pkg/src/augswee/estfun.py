"""Estimating systems: raw functions, plug-in nuisances and augmentation terms.

A system evaluates, for a vector of observations ``z``, a parameter ``theta``
(1-D array of length ``p``) and a fitted nuisance ``phi``:

* ``g(z, theta, phi)``   raw estimating functions, shape ``(n, r)``;
* ``xi(z, theta, phi)``  augmentation terms, same shape;
* ``psi = g + xi``       the augmented functions (``psi = g`` when
  ``augmented=False``, the conventional two-step equations);
* ``q(z, theta)``        optional side functions, shape ``(n, s)``.

The nuisance is always re-estimated from a sample (or a census) through a
:class:`NuisancePlugin`, so the same system serves every replicate of a
simulation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np
from scipy.optimize import bisect, root

from ._validation import as_theta, check_tau
from .exceptions import RootNotBracketedError, SingularMatrixError
from .population import FinitePopulation, SurveySample

__all__ = [
    "WeightedDistribution",
    "NuisancePlugin",
    "EstimatingSystem",
    "weighted_cdf",
    "weighted_quantile",
    "quantile_share_system",
    "lorenz_system",
    "gini_system",
    "mean_system",
    "stack_systems",
    "census_ee_augmentation",
    "census_solve",
    "build_system",
]

# relative slack when comparing cumulative weights with tau
_TAU_SLACK = 1e-12


class WeightedDistribution:
    """Weighted empirical distribution ``F(t) = sum w I(z <= t) / sum w``.

    Building sorts the data once; each CDF or quantile query is a binary
    search.

    Parameters
    ----------
    z : array_like
        Support points (ties allowed).
    w : array_like
        Positive weights.
    """

    def __init__(self, z, w):
        z = np.asarray(z, dtype=float).reshape(-1)
        w = np.asarray(w, dtype=float).reshape(-1)
        order = np.argsort(z, kind="mergesort")
        self.values = z[order]
        self.total = float(w.sum())
        self.mass = w[order] / self.total
        cum = np.cumsum(self.mass)
        cum[-1] = 1.0
        self.cum = cum

    @property
    def size(self) -> int:
        return self.values.size

    def cdf(self, t):
        """Right-continuous CDF; ties use the weak inequality ``z_i <= t``."""
        idx = np.searchsorted(self.values, t, side="right")
        padded = np.concatenate(([0.0], self.cum))
        return padded[idx]

    def quantile(self, tau):
        """``inf{z : F(z) >= tau}`` for ``tau`` in (0, 1]; always an observed value."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0) or np.any(tau > 1):
            raise ValueError("quantile level must lie in (0, 1]")
        idx = np.searchsorted(self.cum, tau - _TAU_SLACK, side="left")
        out = self.values[np.minimum(idx, self.size - 1)]
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return float(np.dot(self.mass, self.values))

    def expect(self, fun) -> float:
        """Weighted mean of ``fun(values)``."""
        return float(np.dot(self.mass, fun(self.values)))

    def upper_sum(self, a, t):
        """``sum_j a_j I(z_j >= t)`` for coefficients ``a`` aligned with ``values``."""
        suffix = np.concatenate((np.cumsum(a[::-1])[::-1], [0.0]))
        return suffix[np.searchsorted(self.values, t, side="left")]


def weighted_cdf(sample: SurveySample) -> WeightedDistribution:
    """Survey-weighted CDF ``F_hat`` of a sample."""
    return WeightedDistribution(sample.z, sample.weights)


def weighted_quantile(sample: SurveySample, tau: float) -> float:
    """Survey-weighted quantile ``inf{z : F_hat(z) >= tau}``, ``tau`` in (0, 1]."""
    check_tau(tau)
    return weighted_cdf(sample).quantile(tau)


@dataclass(frozen=True)
class NuisancePlugin:
    """Recipe for the first-step nuisance estimate ``phi_hat``.

    ``fit(z, w)`` returns the plug-in value: a :class:`WeightedDistribution`
    for ``WeightedCDF``, a float for ``WeightedQuantile`` and
    ``WeightedMean``, a pair ``(xi1, xi2)`` for ``WeightedQuantilePair``
    (``xi1 = -inf`` when ``tau1 = 0``), whatever ``func(z, w)`` returns for
    ``Custom``, a tuple for ``Stacked`` and None for ``NoNuisance``.
    """

    kind: str
    taus: tuple = ()
    func: Callable | None = None
    parts: tuple = ()

    def fit(self, z, w) -> Any:
        if self.kind == "NoNuisance":
            return None
        if self.kind == "WeightedMean":
            return float(np.dot(w, z) / np.sum(w))
        if self.kind == "Custom":
            return self.func(z, w)
        if self.kind == "Stacked":
            return tuple(part.fit(z, w) for part in self.parts)
        dist = WeightedDistribution(z, w)
        if self.kind == "WeightedCDF":
            return dist
        if self.kind == "WeightedQuantile":
            return dist.quantile(self.taus[0])
        if self.kind == "WeightedQuantilePair":
            t1, t2 = self.taus
            xi1 = -np.inf if t1 == 0 else dist.quantile(t1)
            return (xi1, dist.quantile(t2))
        raise ValueError(f"unknown nuisance kind {self.kind!r}")


def _zeros_like_g(z, r):
    return np.zeros((np.asarray(z).shape[0], r))


@dataclass(frozen=True, eq=False)
class EstimatingSystem:
    """Augmented survey-weighted estimating system.

    Parameters
    ----------
    g : callable
        ``g(z, theta, phi) -> (n, r)`` raw functions.
    r, p : int
        Number of equations and of parameters, ``r >= p >= 1``.
    theta_bounds : array_like, shape (p, 2)
        Box ``Theta`` searched by the solvers.
    nuisance : NuisancePlugin
    xi : callable, optional
        ``xi(z, theta, phi) -> (n, r)`` augmentation.
    augmented : bool, default True
        When False the augmentation is switched off.
    q : callable, optional
        Side functions ``q(z, theta) -> (n, s)`` with known census mean 0.
    s : int
        Number of side functions.
    linear : bool
        True when ``psi`` is affine in ``theta``; lets root finders use two
        evaluations instead of a search.
    name : str
    params : dict
        Constructor arguments, kept for reports.
    """

    g: Callable
    r: int
    p: int
    theta_bounds: np.ndarray
    nuisance: NuisancePlugin
    xi: Callable | None = None
    augmented: bool = True
    q: Callable | None = None
    s: int = 0
    linear: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.r >= self.p >= 1):
            raise ValueError(f"need r >= p >= 1; got r={self.r}, p={self.p}")
        bounds = np.asarray(self.theta_bounds, dtype=float).reshape(self.p, 2)
        if np.any(bounds[:, 0] >= bounds[:, 1]):
            raise ValueError("degenerate parameter space: each lower bound must be below its upper bound")
        object.__setattr__(self, "theta_bounds", bounds)
        if (self.q is None) != (self.s == 0):
            raise ValueError("side functions q and their count s must be given together")

    # evaluators
    def raw(self, z, theta, phi) -> np.ndarray:
        return np.asarray(self.g(z, as_theta(theta, self.p), phi), dtype=float).reshape(-1, self.r)

    def augmentation(self, z, theta, phi) -> np.ndarray:
        if not self.augmented or self.xi is None:
            return _zeros_like_g(z, self.r)
        return np.asarray(self.xi(z, as_theta(theta, self.p), phi), dtype=float).reshape(-1, self.r)

    def psi(self, z, theta, phi) -> np.ndarray:
        return self.raw(z, theta, phi) + self.augmentation(z, theta, phi)

    def side(self, z, theta) -> np.ndarray:
        if self.q is None:
            return np.zeros((np.asarray(z).shape[0], 0))
        return np.asarray(self.q(z, as_theta(theta, self.p)), dtype=float).reshape(-1, self.s)

    def moments(self, z, theta, phi, *, include_side: bool = True) -> np.ndarray:
        """``psi`` stacked with ``q`` (when present and requested)."""
        m = self.psi(z, theta, phi)
        if include_side and self.s:
            m = np.hstack([m, self.side(z, theta)])
        return m

    def n_moments(self, include_side: bool = True) -> int:
        return self.r + (self.s if include_side else 0)

    # nuisance helpers
    def fit_nuisance(self, sample: SurveySample):
        return self.nuisance.fit(sample.z, sample.weights)

    def census_nuisance(self, pop: FinitePopulation):
        return self.nuisance.fit(pop.z, np.ones(pop.N))

    def U(self, sample: SurveySample, theta, phi, *, include_side: bool = False) -> np.ndarray:
        """``U_hat(theta, phi) = N^{-1} sum pi_i^{-1} psi_i``."""
        m = self.moments(sample.z, theta, phi, include_side=include_side)
        return sample.weights @ m / sample.N

    # variants
    def conventional(self) -> "EstimatingSystem":
        return replace(self, augmented=False)

    def with_augmented(self, flag: bool) -> "EstimatingSystem":
        return replace(self, augmented=bool(flag))

    def with_side_info(self, q: Callable, s: int) -> "EstimatingSystem":
        return replace(self, q=q, s=int(s))

    def without_side_info(self) -> "EstimatingSystem":
        return replace(self, q=None, s=0)

    @property
    def theta_range(self) -> np.ndarray:
        return self.theta_bounds[:, 1] - self.theta_bounds[:, 0]


def quantile_share_system(tau1: float, tau2: float, augmented: bool = True) -> EstimatingSystem:
    """Share of the total held by units between the ``tau1`` and ``tau2`` quantiles.

    ``g = z {I(xi1 < z <= xi2) - theta}`` and
    ``Xi = -xi2 {I(z <= xi2) - tau2} + xi1 {I(z <= xi1) - tau1}``.
    With ``tau1 = 0`` the lower quantile is ``-inf`` and its term is dropped.
    With ``tau2 = 1`` the upper term vanishes and is dropped as well.
    """
    tau1 = check_tau(tau1, allow_zero=True)
    tau2 = check_tau(tau2, allow_zero=True)
    if tau1 > tau2:
        raise ValueError(f"need tau1 <= tau2; got ({tau1}, {tau2})")
    if tau2 == 0:
        raise ValueError("tau2 must be positive")
    lower, upper = tau1 > 0, tau2 < 1

    def g(z, theta, phi):
        xi1, xi2 = phi
        inside = (z > xi1) & (z <= xi2)
        return (z * (inside - theta[0]))[:, None]

    def xi(z, theta, phi):
        xi1, xi2 = phi
        out = np.zeros(z.shape[0])
        if upper:
            out -= xi2 * ((z <= xi2) - tau2)
        if lower:
            out += xi1 * ((z <= xi1) - tau1)
        return out[:, None]

    return EstimatingSystem(
        g=g,
        xi=xi,
        r=1,
        p=1,
        theta_bounds=[[-0.5, 1.5]],
        nuisance=NuisancePlugin("WeightedQuantilePair", (tau1, tau2)),
        augmented=augmented,
        linear=True,
        name="quantile_share",
        params={"measure": "quantile_share", "tau1": tau1, "tau2": tau2},
    )


def lorenz_system(tau: float, augmented: bool = True) -> EstimatingSystem:
    """Lorenz ordinate ``theta = E[z I(z <= xi_tau)] / E[z]``.

    ``g = z {I(z <= xi) - theta}`` and ``Xi = -xi {I(z <= xi) - tau}``.
    """
    tau = check_tau(tau)

    def g(z, theta, xi_):
        return (z * ((z <= xi_) - theta[0]))[:, None]

    def xi(z, theta, xi_):
        if tau == 1:
            return np.zeros((z.shape[0], 1))
        return (-xi_ * ((z <= xi_) - tau))[:, None]

    return EstimatingSystem(
        g=g,
        xi=xi,
        r=1,
        p=1,
        theta_bounds=[[-0.5, 1.5]],
        nuisance=NuisancePlugin("WeightedQuantile", (tau,)),
        augmented=augmented,
        linear=True,
        name="lorenz",
        params={"measure": "lorenz", "tau": tau},
    )


def _gini_default(u):
    return 2.0 * u - 1.0


def _gini_default_deriv(u):
    return np.full_like(np.asarray(u, dtype=float), 2.0)


def gini_system(psi_fun=None, psi_deriv=None, augmented: bool = True) -> EstimatingSystem:
    """Generalized Gini ``theta = E[psi{F(z)} z] / E[z]``.

    ``g = psi{F(z)} z - theta z``; the augmentation replaces the model
    expectation by its survey-weighted plug-in,
    ``Xi(z_i) = N_hat^{-1} sum_j w_j z_j psi'{F(z_j)} {I(z_j >= z_i) - F(z_j)}``.

    Parameters
    ----------
    psi_fun, psi_deriv : callable, optional
        Weight function on ``[0, 1]`` and its derivative.  The default
        ``psi(u) = 2u - 1`` gives the classical Gini coefficient.  A custom
        ``psi_fun`` must come with its derivative.

    Notes
    -----
    ``F`` uses the weak inequality ``I(z_i <= z)``, so a constant population
    has ``theta = psi(1)`` (1 for the classical Gini).
    """
    if psi_fun is None:
        if psi_deriv is not None:
            raise ValueError("psi_deriv given without psi_fun")
        psi_fun, psi_deriv = _gini_default, _gini_default_deriv
    elif psi_deriv is None or not callable(psi_deriv):
        raise ValueError("a custom psi_fun needs its derivative psi_deriv")

    def g(z, theta, dist):
        return (psi_fun(dist.cdf(z)) * z - theta[0] * z)[:, None]

    def xi(z, theta, dist):
        vals = dist.values
        a = dist.mass * vals * psi_deriv(dist.cdf(vals))
        centre = float(np.dot(a, dist.cdf(vals)))
        return (dist.upper_sum(a, z) - centre)[:, None]

    return EstimatingSystem(
        g=g,
        xi=xi,
        r=1,
        p=1,
        theta_bounds=[[-1.5, 1.5]],
        nuisance=NuisancePlugin("WeightedCDF"),
        augmented=augmented,
        linear=True,
        name="gini",
        params={"measure": "gini", "default_psi": psi_fun is _gini_default},
    )


def mean_system(bounds=(-1e6, 1e6)) -> EstimatingSystem:
    """Linear system ``g = z - theta`` with no nuisance (population mean)."""
    return EstimatingSystem(
        g=lambda z, theta, phi: (z - theta[0])[:, None],
        r=1,
        p=1,
        theta_bounds=[list(bounds)],
        nuisance=NuisancePlugin("NoNuisance"),
        linear=True,
        name="mean",
        params={"measure": "mean"},
    )


def stack_systems(*systems: EstimatingSystem, name: str = "stacked") -> EstimatingSystem:
    """Concatenate systems; the joint ``theta`` is the concatenation of theirs."""
    if not systems:
        raise ValueError("need at least one system")
    p_off = np.cumsum([0] + [s.p for s in systems])

    def split(theta):
        return [theta[p_off[j] : p_off[j + 1]] for j in range(len(systems))]

    def g(z, theta, phi):
        return np.hstack([s.raw(z, t, f) for s, t, f in zip(systems, split(theta), phi)])

    def xi(z, theta, phi):
        return np.hstack([s.augmentation(z, t, f) for s, t, f in zip(systems, split(theta), phi)])

    return EstimatingSystem(
        g=g,
        xi=xi,
        r=sum(s.r for s in systems),
        p=int(p_off[-1]),
        theta_bounds=np.vstack([s.theta_bounds for s in systems]),
        nuisance=NuisancePlugin("Stacked", parts=tuple(s.nuisance for s in systems)),
        augmented=True,
        linear=all(s.linear for s in systems),
        name=name,
        params={"parts": [s.params for s in systems]},
    )


def census_ee_augmentation(T: Callable, D: Callable, sample: SurveySample, *, step=None, max_cond=1e12):
    """Augmentation for a nuisance defined by census equations ``mean T(z, phi) = 0``.

    Just-identified case: ``Xi(z, theta, phi) = -D(theta, phi) H(phi)^{-1} T(z, phi)``
    with ``H`` the Jacobian of the survey-weighted mean of ``T``, taken by
    central finite differences on ``sample``.

    Parameters
    ----------
    T : callable
        ``T(z, phi) -> (n, q)``.
    D : callable
        ``D(theta, phi) -> (r, q)`` pathwise derivative of the census
        equations with respect to ``phi``.
    sample : SurveySample
        Sample supplying the weights for ``H``.
    step : float or array_like, optional
        Finite-difference half-width per component; defaults to
        ``1e-6 max(1, |phi_j|)``.  Indicator-type ``T`` need a
        bandwidth-sized step.
    max_cond : float
        Largest condition number of ``H`` accepted.

    Returns
    -------
    callable
        ``xi(z, theta, phi)`` usable in :class:`EstimatingSystem`.
    """
    w = sample.weights / sample.weights.sum()
    z_s = sample.z
    cache: dict = {}

    def mean_T(phi):
        return w @ np.asarray(T(z_s, phi), dtype=float).reshape(z_s.shape[0], -1)

    def H(phi):
        key = tuple(np.round(phi, 15))
        if key in cache:
            return cache[key]
        q = phi.size
        h = np.full(q, 1e-6) * np.maximum(1.0, np.abs(phi)) if step is None else np.broadcast_to(step, (q,))
        Hm = np.empty((mean_T(phi).size, q))
        for j in range(q):
            e = np.zeros(q)
            e[j] = h[j]
            Hm[:, j] = (mean_T(phi + e) - mean_T(phi - e)) / (2 * h[j])
        if Hm.shape[0] != q:
            raise ValueError("only the just-identified case dim(T) = dim(phi) is supported")
        cond = np.linalg.cond(Hm)
        if not np.isfinite(cond) or cond > max_cond:
            raise SingularMatrixError(f"nuisance Jacobian H is singular (condition number {cond:.3g})")
        cache[key] = Hm
        return Hm

    def xi(z, theta, phi):
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        Hm = H(phi)
        Dm = np.atleast_2d(np.asarray(D(theta, phi), dtype=float))
        Tz = np.asarray(T(z, phi), dtype=float).reshape(np.asarray(z).shape[0], -1)
        return -Tz @ np.linalg.solve(Hm.T, Dm.T)

    return xi


def census_solve(pop: FinitePopulation, system: EstimatingSystem, *, xtol: float = 1e-12) -> np.ndarray:
    """Solve the census equations ``U_N(theta, phi_N) = 0``.

    The nuisance is computed on the whole population with unit weights and
    the raw functions ``g`` are used (the augmentation has census mean zero
    at ``phi_N`` for the built-in measures but is not needed).  Scalar
    ``theta`` is found by bisection to ``xtol``; vector ``theta`` by a
    Powell hybrid solve.

    Raises
    ------
    RootNotBracketedError
        When ``U_N`` has no sign change over ``Theta``.
    """
    phi = system.census_nuisance(pop)

    def U(theta):
        return np.mean(system.raw(pop.z, theta, phi), axis=0)

    if system.p == 1 and system.r == 1:
        lo, hi = system.theta_bounds[0]
        f_lo, f_hi = U([lo])[0], U([hi])[0]
        if f_lo == 0:
            return np.array([lo])
        if f_hi == 0:
            return np.array([hi])
        if np.sign(f_lo) == np.sign(f_hi):
            raise RootNotBracketedError(
                f"census equation has no sign change on [{lo}, {hi}] (U={f_lo:.3g}, {f_hi:.3g})"
            )
        return np.array([bisect(lambda t: U([t])[0], lo, hi, xtol=xtol, maxiter=500)])
    if system.r != system.p:
        raise ValueError("census_solve needs a just-identified system")
    start = system.theta_bounds.mean(axis=1)
    if system.linear:
        # U is affine in theta: recover it from p + 1 evaluations
        base = U(start)
        B = np.column_stack([U(start + e) - base for e in np.eye(system.p)])
        try:
            return start - np.linalg.solve(B, base)
        except np.linalg.LinAlgError:
            raise RootNotBracketedError("census equations are singular in theta") from None
    sol = root(U, start, method="hybr", tol=xtol)
    if not sol.success:
        raise RootNotBracketedError(f"census solve failed: {sol.message}")
    return sol.x


def build_system(config: dict) -> EstimatingSystem:
    """Construct a system from a config such as
    ``{"measure": "quantile_share", "tau1": 0.25, "tau2": 0.5, "augmented": true}``."""
    if not isinstance(config, dict) or "measure" not in config:
        raise ValueError("system config needs a 'measure' field")
    measure = config["measure"]
    augmented = config.get("augmented", True)
    if not isinstance(augmented, bool):
        raise ValueError("'augmented' must be true or false")
    if measure == "quantile_share":
        return quantile_share_system(config["tau1"], config["tau2"], augmented)
    if measure == "lorenz":
        return lorenz_system(config["tau"], augmented)
    if measure == "gini":
        return gini_system(augmented=augmented)
    raise ValueError(f"unknown measure {measure!r}; expected quantile_share, lorenz or gini")
