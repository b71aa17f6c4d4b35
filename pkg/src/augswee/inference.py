"""GEL ratio statistics, interval inversion and restricted estimation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.linalg import null_space
from scipy.optimize import brentq, minimize, minimize_scalar, root
from scipy.stats import chi2

from ._validation import as_theta, check_level
from .estfun import EstimatingSystem
from .exceptions import ConvergenceError, InfeasibleConstraintError
from .gel import GelFit, Profile, _vector_outer, fit_gel, fit_gmm, get_family, profile_for
from .population import SurveySample

__all__ = [
    "chi2_quantile",
    "weighted_chi2_sf",
    "weighted_chi2_quantile",
    "RatioTest",
    "ConfidenceInterval",
    "ConfidenceRegion",
    "Constraint",
    "negligible_fraction",
    "ratio_statistic",
    "gel_ratio",
    "ci_invert",
    "fit_restricted",
    "restricted_ratio",
    "subvector_ci",
    "NEGLIGIBLE_FRACTION",
]

NEGLIGIBLE_FRACTION = 0.02
_T_CAP = 1e8


def chi2_quantile(level: float, df: int) -> float:
    """Upper ``1 - level`` point of chi-square with ``df`` degrees of freedom."""
    return float(chi2.ppf(check_level(level), df))


def weighted_chi2_sf(x: float, weights) -> float:
    """``P(sum_j lambda_j chi2_1 > x)`` by Imhof's inversion formula.

    Equal weights use the exact chi-square tail.
    """
    lam = np.asarray(weights, dtype=float).reshape(-1)
    lam = lam[lam > 1e-12]
    if lam.size == 0:
        return 0.0 if x > 0 else 1.0
    if x <= 0:
        return 1.0
    if np.allclose(lam, lam[0], rtol=1e-12, atol=0):
        return float(chi2.sf(x / lam[0], lam.size))
    return _imhof_sf(x, lam)


def _imhof_sf(x: float, lam: np.ndarray) -> float:
    # Imhof: P(Q > x) = 1/2 + (1/pi) int_0^inf sin(A(u) - x u / 2) / (u S(u)) du.
    # The slowly decaying tail is split as sin A cos(xu/2) - cos A sin(xu/2)
    # and handed to QUADPACK's Fourier-integral routine.
    def angle(u):
        return 0.5 * float(np.sum(np.arctan(lam * u)))

    def scale(u):
        return u * float(np.prod((1.0 + (lam * u) ** 2) ** 0.25))

    def head(u):
        if u == 0.0:
            return 0.5 * (lam.sum() - x)
        return math.sin(angle(u) - 0.5 * x * u) / scale(u)

    a = 1.0 / lam.max()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        v0 = quad(head, 0.0, a, epsabs=1e-13, limit=200)[0]
        v1 = quad(lambda u: math.sin(angle(u)) / scale(u), a, np.inf, weight="cos", wvar=0.5 * x,
                  epsabs=1e-13, limlst=200)[0]
        v2 = quad(lambda u: math.cos(angle(u)) / scale(u), a, np.inf, weight="sin", wvar=0.5 * x,
                  epsabs=1e-13, limlst=200)[0]
    return float(min(1.0, max(0.0, 0.5 + (v0 + v1 - v2) / math.pi)))


def weighted_chi2_quantile(level: float, weights) -> float:
    """Quantile of ``sum_j lambda_j chi2_1`` at probability ``level``."""
    level = check_level(level)
    lam = np.asarray(weights, dtype=float).reshape(-1)
    lam = lam[lam > 1e-12]
    if lam.size == 0:
        return 0.0
    if np.allclose(lam, lam[0], rtol=1e-12, atol=0):
        return float(lam[0] * chi2.ppf(level, lam.size))
    lo = lam.min() * chi2.ppf(level, lam.size) * 0.5
    hi = lam.max() * chi2.ppf(level, lam.size) * 2.0
    return float(brentq(lambda t: weighted_chi2_sf(t, lam) - (1 - level), lo, hi, xtol=1e-10))


@dataclass(frozen=True)
class RatioTest:
    statistic: float
    df: int
    p_value: float
    calibration: str = "chi2"
    weights: tuple = ()

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "calibration": self.calibration,
            "weights": list(self.weights),
        }


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    estimate: float
    level: float
    threshold: float
    clipped_lower: bool = False
    clipped_upper: bool = False

    @property
    def length(self) -> float:
        return self.upper - self.lower

    @property
    def clipped(self) -> bool:
        return self.clipped_lower or self.clipped_upper

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "estimate": self.estimate,
            "level": self.level,
            "threshold": self.threshold,
            "clipped": self.clipped,
        }


@dataclass
class ConfidenceRegion:
    """Region ``{t : statistic(t) <= threshold}`` for ``k >= 2`` components."""

    statistic: Callable
    threshold: float
    index: tuple
    estimate: np.ndarray
    level: float

    def contains(self, value) -> bool:
        return bool(self.statistic(np.asarray(value, dtype=float)) <= self.threshold)


def negligible_fraction(sample: SurveySample, threshold: float = NEGLIGIBLE_FRACTION) -> bool:
    """True for single-stage samples with ``n / N <= threshold``."""
    if sample.design in ("Stratified", "TwoStageCluster"):
        return False
    return sample.n / sample.N <= threshold


def ratio_statistic(profile: Profile, fit: GelFit, theta) -> float:
    """``T_N(theta) = 2 n [P(theta) - P(theta_hat)]`` floored at zero."""
    val = profile(np.atleast_1d(np.asarray(theta, dtype=float)))
    if not math.isfinite(val):
        return math.inf
    return max(0.0, 2.0 * profile.sample.n * (val - fit.objective))


def _fit(sample, system, family, phi=None) -> GelFit:
    if str(family).lower() == "gmm":
        return fit_gmm(sample, system, phi=phi, include_side=False)
    return fit_gel(sample, system, family, phi=phi, include_side=False)


def _delta_weights(sample, system, fit, variance=None, **kw) -> np.ndarray:
    from .variance import variance_report

    rep = variance if variance is not None else variance_report(sample, system, fit, **kw)
    return rep.delta_eigenvalues()


def gel_ratio(
    sample: SurveySample,
    system: EstimatingSystem,
    family,
    theta,
    *,
    fit: GelFit | None = None,
    calibration: str = "auto",
    variance=None,
    gamma_B: int = 200,
    seed=None,
) -> RatioTest:
    """GEL ratio test of ``theta_N = theta``.

    Parameters
    ----------
    calibration : {"auto", "chi2", "weighted"}
        ``auto`` uses chi-square with ``p`` degrees of freedom for
        single-stage samples with negligible sampling fraction and the
        weighted chi-square otherwise.  The weights are the eigenvalues of
        ``Omega^{1/2} W^{-1} Gamma Sigma Gamma' W^{-1} Omega^{1/2}``
        estimated by the variance module.
    variance : VarianceReport, optional
        Reused for the weights when given.
    """
    theta = as_theta(theta, system.p)
    fit = _fit(sample, system, family) if fit is None else fit
    prof = profile_for(fit, sample, system)
    T = ratio_statistic(prof, fit, theta)
    if prof.last is not None and not prof.last.converged and not prof.last.hull_failure:
        raise ConvergenceError(f"inner maximization failed at theta={theta.tolist()}")
    if calibration == "auto":
        calibration = "chi2" if negligible_fraction(sample) else "weighted"
    if calibration == "chi2":
        return RatioTest(T, system.p, float(chi2.sf(T, system.p)) if math.isfinite(T) else 0.0, "chi2")
    if calibration != "weighted":
        raise ValueError(f"unknown calibration {calibration!r}")
    lam = _delta_weights(sample, system, fit, variance, gamma_B=gamma_B, seed=seed)
    pv = weighted_chi2_sf(T, lam) if math.isfinite(T) else 0.0
    return RatioTest(T, system.p, pv, "weighted_chi2", tuple(float(v) for v in lam))


def _threshold(level, df, calibration, weights=None) -> float:
    if calibration == "chi2":
        return chi2_quantile(level, df)
    return weighted_chi2_quantile(level, weights)


def _invert_scalar(stat: Callable, center: float, lo: float, hi: float, crit: float, xtol: float):
    """Outermost crossings of ``stat(t) = crit`` on both sides of ``center``.

    Points ``center +- h 2^j`` are scanned out to the boundary of
    ``[lo, hi]``.  The outermost point still inside the region and its outer
    neighbour bracket the crossing, which Brent's method then locates.
    """
    f = lambda t: min(stat(t), _T_CAP) - crit
    out = []
    for direction, edge in ((-1.0, lo), (1.0, hi)):
        pts, h = [center], 1e-3 * (hi - lo)
        while (edge - pts[-1]) * direction > 0:
            pts.append(edge if (edge - center - direction * h) * direction <= 0 else center + direction * h)
            h *= 2.0
        vals = [f(t) for t in pts[1:]]
        inside = [j for j, v in enumerate(vals, start=1) if v <= 0]
        last = inside[-1] if inside else 0
        if last == len(pts) - 1 and last > 0:
            out.append((edge, True))
            continue
        a, b = pts[last], pts[last + 1]
        if f(a) > 0:  # the estimate itself is outside (non-converged fit)
            out.append((a, False))
            continue
        out.append((brentq(f, min(a, b), max(a, b), xtol=xtol), False))
    (low, clip_lo), (up, clip_hi) = out
    return low, up, clip_lo, clip_hi


def ci_invert(
    sample: SurveySample,
    system: EstimatingSystem,
    family,
    level: float = 0.95,
    *,
    fit: GelFit | None = None,
    calibration: str = "chi2",
    weights=None,
) -> ConfidenceInterval:
    """Interval ``{theta : T_N(theta) <= c}`` for scalar ``theta``.

    ``c`` is the chi-square(1) quantile, or the weighted chi-square quantile
    when ``calibration="weighted"`` (with eigen-weights ``weights``,
    estimated when omitted).  Endpoints that cannot be bracketed inside
    ``Theta`` are clipped to it and flagged.
    """
    if system.p != 1:
        raise ValueError("ci_invert needs a scalar parameter; use subvector_ci")
    level = check_level(level)
    fit = _fit(sample, system, family) if fit is None else fit
    if calibration == "weighted" and weights is None:
        weights = _delta_weights(sample, system, fit)
    crit = _threshold(level, 1, calibration, weights)
    prof = profile_for(fit, sample, system)
    lo, hi = system.theta_bounds[0]
    est = float(fit.theta[0])
    low, up, cl, cu = _invert_scalar(
        lambda t: ratio_statistic(prof, fit, [t]), est, lo, hi, crit, 1e-10 * (hi - lo)
    )
    if cl or cu:
        warnings.warn("confidence interval clipped to the parameter space", RuntimeWarning, stacklevel=2)
    return ConfidenceInterval(low, up, est, level, crit, cl, cu)


@dataclass(frozen=True)
class Constraint:
    """Parametric restriction ``R(theta) = 0`` with ``k`` rows.

    Use :meth:`linear`, :meth:`fix` or :meth:`nonlinear` to build one.
    """

    R: Callable
    k: int
    Phi: Callable | None = None
    A: np.ndarray | None = field(default=None, repr=False)
    b: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def linear(cls, A, b) -> "Constraint":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if A.shape[0] != b.shape[0]:
            raise ValueError("A and b must have the same number of rows")
        return cls(R=lambda t: A @ t - b, k=A.shape[0], Phi=lambda t: A, A=A, b=b)

    @classmethod
    def fix(cls, index, value, p: int) -> "Constraint":
        """Pin ``theta[index] = value``."""
        index = np.atleast_1d(index)
        A = np.zeros((index.size, p))
        A[np.arange(index.size), index] = 1.0
        return cls.linear(A, np.atleast_1d(value))

    @classmethod
    def nonlinear(cls, R: Callable, k: int, Phi: Callable | None = None) -> "Constraint":
        return cls(R=R, k=int(k), Phi=Phi)

    @property
    def is_linear(self) -> bool:
        return self.A is not None

    def jacobian(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.Phi is not None:
            return np.atleast_2d(np.asarray(self.Phi(theta), dtype=float))
        h = 1e-6 * np.maximum(1.0, np.abs(theta))
        cols = []
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h[j]
            cols.append((np.atleast_1d(self.R(theta + e)) - np.atleast_1d(self.R(theta - e))) / (2 * h[j]))
        return np.column_stack(cols)


def _side_system(system: EstimatingSystem, side_info) -> EstimatingSystem:
    if side_info is None:
        return system
    if isinstance(side_info, tuple):
        q, s = side_info
    else:
        q = side_info
        s = None
    if s is None:
        s = int(np.asarray(q(np.zeros(1), system.theta_bounds.mean(axis=1))).reshape(1, -1).shape[1])
    return system.with_side_info(q, s)


def _check_rank(constraint: Constraint, theta) -> None:
    Phi = constraint.jacobian(theta)
    if Phi.shape[0] != constraint.k:
        raise ValueError(f"constraint Jacobian has {Phi.shape[0]} rows, expected k={constraint.k}")
    sv = np.linalg.svd(Phi, compute_uv=False)
    if sv.size < constraint.k or sv.min() <= 1e-10 * max(1.0, sv.max()):
        raise ValueError("constraint Jacobian Phi is rank deficient")


def fit_restricted(
    sample: SurveySample,
    system: EstimatingSystem,
    family,
    constraint: Constraint | None = None,
    side_info=None,
    *,
    phi=None,
) -> GelFit:
    """Restricted GEL fit over ``{theta : R(theta) = 0}`` with moments ``(psi, q)``.

    Parameters
    ----------
    constraint : Constraint, optional
        ``k = 0`` when omitted.
    side_info : callable or (callable, int), optional
        Side functions ``q(z, theta)`` (with their count ``s``); the system's
        own ``q`` is used when omitted.

    Linear constraints are eliminated by the affine reparameterization
    ``theta = theta_0 + Z u`` with ``Z`` a null-space basis.  Nonlinear ones
    use an augmented-Lagrangian penalty loop, escalating the penalty until
    ``||R(theta)|| < 1e-8``.
    """
    fam_name = str(family).lower() if not hasattr(family, "kind") else family.kind
    if fam_name == "gmm":
        raise ValueError("restricted estimation is implemented for the GEL families")
    sys_r = _side_system(system, side_info)
    phi = sys_r.fit_nuisance(sample) if phi is None else phi
    if constraint is None:
        fit = fit_gel(sample, sys_r, family, phi=phi, include_side=True)
        return fit
    if constraint.k > sys_r.p:
        raise ValueError(f"constraint has k={constraint.k} rows but theta has p={sys_r.p} components")
    prof = Profile(sample, sys_r, family, phi, include_side=True)
    lo, hi = sys_r.theta_bounds[:, 0], sys_r.theta_bounds[:, 1]
    start = fit_gel(sample, sys_r.without_side_info(), family, phi=phi, include_side=False).theta
    outer = 0
    if constraint.is_linear:
        A, b = constraint.A, constraint.b
        _check_rank(constraint, start)
        theta0, *_ = np.linalg.lstsq(A, b, rcond=None)
        if np.linalg.norm(A @ theta0 - b) > 1e-10 * max(1.0, np.linalg.norm(b)):
            raise InfeasibleConstraintError("linear constraint has no solution")
        Z = null_space(A)
        # move theta0 to the point of the affine set closest to the start
        if Z.shape[1]:
            theta0 = theta0 + Z @ (Z.T @ (start - theta0))
        if Z.shape[1] == 0:
            if np.any(theta0 < lo - 1e-12) or np.any(theta0 > hi + 1e-12):
                raise InfeasibleConstraintError(f"pinned value {theta0.tolist()} lies outside Theta")
            theta = theta0
        elif Z.shape[1] == 1:
            z = Z[:, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1, t2 = (lo - theta0) / z, (hi - theta0) / z
            active = np.abs(z) > 1e-14
            if np.any(~active & ((theta0 < lo) | (theta0 > hi))):
                raise InfeasibleConstraintError("constraint set misses Theta")
            u_lo = np.max(np.minimum(t1, t2)[active])
            u_hi = np.min(np.maximum(t1, t2)[active])
            if u_lo > u_hi:
                raise InfeasibleConstraintError("constraint set misses Theta")
            res = minimize_scalar(
                lambda u: min(prof(theta0 + u * z), 1e12),
                bounds=(u_lo, u_hi),
                method="bounded",
                options={"xatol": 1e-10 * max(1.0, u_hi - u_lo)},
            )
            theta, outer = theta0 + res.x * z, res.nfev
        else:
            def f(u):
                t = theta0 + Z @ u
                if np.any(t < lo) or np.any(t > hi):
                    return 1e12
                return min(prof(t), 1e12)

            res = minimize(f, np.zeros(Z.shape[1]), method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": 1e-15, "maxfev": 2000})
            theta, outer = theta0 + Z @ res.x, res.nfev
    else:
        _check_rank(constraint, start)
        R = lambda t: np.atleast_1d(np.asarray(constraint.R(t), dtype=float))
        if constraint.k == sys_r.p:
            sol = root(R, start, tol=1e-12)
            if not sol.success or np.linalg.norm(R(sol.x)) > 1e-8:
                raise InfeasibleConstraintError(f"could not solve R(theta) = 0: {sol.message}")
            theta = sol.x
        else:
            lam = np.zeros(constraint.k)
            mu = 10.0
            theta = start.copy()
            prev = np.linalg.norm(R(theta))
            for _ in range(40):
                def L(t, lam=lam, mu=mu):
                    if np.any(t < lo) or np.any(t > hi):
                        return 1e12
                    r = R(t)
                    return min(prof(t), 1e12) + lam @ r + 0.5 * mu * r @ r

                res = minimize(L, theta, method="Nelder-Mead",
                               options={"xatol": 1e-12, "fatol": 1e-16, "maxfev": 4000})
                theta = res.x
                outer += res.nfev
                r = R(theta)
                norm = np.linalg.norm(r)
                if norm < 1e-8:
                    break
                lam = lam + mu * r
                if norm > 0.25 * prev:
                    mu *= 10.0
                prev = norm
            else:
                raise ConvergenceError(f"penalty loop stopped with ||R|| = {np.linalg.norm(R(theta)):.3g}")
    final = prof.solve(np.asarray(theta, dtype=float))
    fam = get_family(family)
    u = prof.scaled_moments(theta)
    r1 = fam.rho1(u @ final.eta) if final.converged else np.full(sample.n, np.nan)
    return GelFit(
        theta=np.asarray(theta, dtype=float),
        eta=final.eta,
        p_hat=r1 / r1.sum(),
        objective=float(final.value),
        inner_iters=prof.inner_iters,
        outer_iters=outer,
        converged=bool(final.converged),
        f_N=sample.f_N,
        family=fam.kind,
        phi=phi,
        include_side=True,
        n=sample.n,
        message="" if final.converged else "inner maximization failed at the restricted estimate",
    )


def restricted_ratio(
    sample: SurveySample,
    system: EstimatingSystem,
    family,
    constraint: Constraint | None = None,
    side_info=None,
) -> RatioTest:
    """``T^R = 2 n [P^R(theta_R) - P(theta_hat)]`` referred to chi-square(s + k).

    The unrestricted fit uses ``psi`` alone; the restricted one adds the
    side functions and imposes the constraint.
    """
    sys_r = _side_system(system, side_info)
    phi = sys_r.fit_nuisance(sample)
    base = fit_gel(sample, sys_r.without_side_info(), family, phi=phi, include_side=False)
    fit_r = fit_restricted(sample, sys_r, family, constraint, phi=phi)
    if not (base.converged and fit_r.converged):
        raise ConvergenceError("restricted or unrestricted fit did not converge")
    k = 0 if constraint is None else constraint.k
    df = sys_r.s + k
    if df == 0:
        raise ValueError("nothing to test: no side functions and no constraint")
    T = max(0.0, 2.0 * sample.n * (fit_r.objective - base.objective))
    return RatioTest(T, df, float(chi2.sf(T, df)), "chi2")


def subvector_ci(
    sample: SurveySample,
    system: EstimatingSystem,
    family,
    index,
    level: float = 0.95,
    *,
    fit: GelFit | None = None,
):
    """Confidence set for ``theta[index]`` profiling out the other components.

    Returns a :class:`ConfidenceInterval` when a single component is
    requested (or ``p = 1``), otherwise a :class:`ConfidenceRegion`.
    """
    level = check_level(level)
    index = tuple(int(i) for i in np.atleast_1d(index))
    k = len(index)
    if system.p == 1:
        return ci_invert(sample, system, family, level, fit=fit)
    fit = _fit(sample, system, family) if fit is None else fit
    prof = profile_for(fit, sample, system)
    rest = [j for j in range(system.p) if j not in index]
    bounds = system.theta_bounds
    crit = chi2_quantile(level, k)
    state = {"rest": fit.theta[rest].copy()}

    def profiled(values) -> float:
        values = np.atleast_1d(values)
        if not rest:
            return ratio_statistic(prof, fit, values)

        def full(t_rest):
            t = np.empty(system.p)
            t[list(index)] = values
            t[rest] = t_rest
            return t

        if len(rest) == 1:
            j = rest[0]
            lo, hi = bounds[j]
            w = 0.05 * (hi - lo)
            c = float(state["rest"][0])
            for _ in range(8):
                a, b = max(lo, c - w), min(hi, c + w)
                res = minimize_scalar(
                    lambda x: min(prof(full([x])), 1e12), bounds=(a, b), method="bounded",
                    options={"xatol": 1e-10 * (hi - lo)},
                )
                near_edge = (res.x - a < 0.02 * (b - a) and a > lo) or (b - res.x < 0.02 * (b - a) and b < hi)
                c = res.x
                if not near_edge:
                    break
            best_rest, best = np.array([res.x]), res.fun
        else:
            best_rest, best, _, _ = _vector_outer(prof, bounds[rest], state["rest"], restarts=0)
        if best < 1e12:
            state["rest"] = np.asarray(best_rest)
        return max(0.0, 2.0 * sample.n * (best - fit.objective)) if best < 1e12 else math.inf

    if k == 1:
        lo, hi = bounds[index[0]]
        est = float(fit.theta[index[0]])
        low, up, cl, cu = _invert_scalar(lambda t: profiled([t]), est, lo, hi, crit, 1e-9 * (hi - lo))
        state["rest"] = fit.theta[rest].copy()
        return ConfidenceInterval(low, up, est, level, crit, cl, cu)
    return ConfidenceRegion(profiled, crit, index, fit.theta[list(index)], level)
