"""Two-step GEL (EL, ET, CU) and GMM estimation.

The computational form is the scaled dual criterion

    P(theta, eta) = n^{-1} sum_i [rho(eta' d_i psi_i) - rho(0)],   d_i = f_N / pi_i,

with ``f_N = n_B / N`` so that the ``d_i`` are O(1).  For fixed ``theta``
the criterion is concave in ``eta`` and maximized by damped Newton; the
estimator minimizes the resulting profile over ``Theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.optimize import brentq, minimize, minimize_scalar
from scipy.stats import qmc

from ._validation import as_theta
from .estfun import EstimatingSystem
from .exceptions import ConvergenceError, SingularMatrixError
from .population import SurveySample

__all__ = [
    "RhoFamily",
    "EL",
    "ET",
    "CU",
    "get_family",
    "GelFit",
    "Profile",
    "gel_objective",
    "inner_max_eta",
    "fit_gel",
    "fit_gmm",
    "empirical_probabilities",
    "solve_moment_root",
    "scaled_weights",
]

EL_MARGIN = 1e-10
# |eta| * max|d psi| beyond this means EL has no interior maximizer:
# zero lies outside the convex hull and the supremum is +inf
_EL_DIVERGENCE = 1e8
_PROFILE_CAP = 1e12


@dataclass(frozen=True)
class RhoFamily:
    """Concave carrier ``rho`` with ``rho1(0) = rho2(0) = -1``."""

    kind: str
    rho: Callable
    rho1: Callable
    rho2: Callable
    upper: float = math.inf  # domain is (-inf, upper)

    @property
    def rho0(self) -> float:
        return float(self.rho(np.zeros(1))[0])


EL = RhoFamily(
    "el",
    rho=lambda v: np.log1p(-v),
    rho1=lambda v: -1.0 / (1.0 - v),
    rho2=lambda v: -1.0 / (1.0 - v) ** 2,
    upper=1.0,
)
ET = RhoFamily("et", rho=lambda v: -np.exp(v), rho1=lambda v: -np.exp(v), rho2=lambda v: -np.exp(v))
CU = RhoFamily(
    "cu",
    rho=lambda v: -v - 0.5 * v * v,
    rho1=lambda v: -1.0 - v,
    rho2=lambda v: np.full_like(v, -1.0),
)
_FAMILIES = {"el": EL, "et": ET, "cu": CU}


def get_family(family) -> RhoFamily:
    if isinstance(family, RhoFamily):
        return family
    key = str(family).lower()
    if key not in _FAMILIES:
        raise ValueError(f"unknown GEL family {family!r}; expected one of {sorted(_FAMILIES)}")
    return _FAMILIES[key]


def scaled_weights(sample: SurveySample) -> np.ndarray:
    """``d_i = f_N / pi_i`` with ``f_N = n_B / N``."""
    return sample.f_N / sample.pi


def _value(u: np.ndarray, eta: np.ndarray, fam: RhoFamily) -> float:
    v = u @ eta
    if fam.upper < math.inf and np.any(v >= fam.upper - EL_MARGIN):
        return -math.inf
    with np.errstate(over="ignore"):
        val = float(np.mean(fam.rho(v))) - fam.rho0
    return val if math.isfinite(val) else -math.inf


@dataclass
class InnerResult:
    eta: np.ndarray
    value: float
    iters: int
    converged: bool
    hull_failure: bool = False


def _inner(u: np.ndarray, fam: RhoFamily, eta0=None, tol: float = 1e-10, maxiter: int = 200) -> InnerResult:
    """Damped Newton ascent of ``eta -> mean(rho(u eta)) - rho0``."""
    n, m = u.shape
    eta = np.zeros(m) if eta0 is None else np.array(eta0, dtype=float)
    val = _value(u, eta, fam)
    # the maximum is at least P(theta, 0) = 0, so a worse warm start is dropped
    if not (math.isfinite(val) and val >= 0.0):
        eta = np.zeros(m)
        val = 0.0
    if fam is EL and m == 1:
        col = u[:, 0]
        if (np.all(col >= 0) or np.all(col <= 0)) and np.any(col != 0):
            return InnerResult(np.full(1, math.nan), math.inf, 0, False, True)
    umax = float(np.max(np.abs(u))) if u.size else 0.0
    for it in range(1, maxiter + 1):
        v = u @ eta
        with np.errstate(over="ignore"):
            r1 = fam.rho1(v)
            r2 = fam.rho2(v)
        grad = u.T @ r1 / n
        if np.linalg.norm(grad) < tol:
            return InnerResult(eta, val, it - 1, True)
        hess = (u * r2[:, None]).T @ u / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = eta - t * step
            cval = _value(u, cand, fam)
            if cval >= val - 1e-15 * max(1.0, abs(val)):
                break
            t *= 0.5
            if t < 1e-30:
                return InnerResult(eta, val, it, False)
        eta, val = cand, cval
        if fam is EL and np.linalg.norm(eta) * umax > _EL_DIVERGENCE:
            return InnerResult(eta, math.inf, it, False, True)
    return InnerResult(eta, val, maxiter, False)


class Profile:
    """Inner-maximized criterion ``theta -> sup_eta P(theta, eta)``.

    Keeps the last ``eta`` as a warm start for the next call.  With
    ``weight_matrix`` given, the profile is instead the GMM quadratic form
    ``0.5 ubar' W^{-1} ubar`` on the same scale.
    """

    def __init__(
        self,
        sample: SurveySample,
        system: EstimatingSystem,
        family,
        phi,
        *,
        include_side: bool = True,
        weight_matrix: np.ndarray | None = None,
    ):
        self.sample = sample
        self.system = system
        self.family = None if weight_matrix is not None else get_family(family)
        self.phi = phi
        self.include_side = include_side
        self.d = scaled_weights(sample)
        self.weight_matrix = weight_matrix
        self._eta = None
        self.inner_iters = 0
        self.nfev = 0
        self.last: InnerResult | None = None

    def scaled_moments(self, theta) -> np.ndarray:
        m = self.system.moments(self.sample.z, theta, self.phi, include_side=self.include_side)
        return self.d[:, None] * m

    def solve(self, theta) -> InnerResult:
        u = self.scaled_moments(theta)
        self.nfev += 1
        if self.weight_matrix is not None:
            ubar = u.mean(axis=0)
            sol = np.linalg.solve(self.weight_matrix, ubar)
            res = InnerResult(-sol, 0.5 * float(ubar @ sol), 0, True)
        else:
            res = _inner(u, self.family, self._eta)
            if res.converged:
                self._eta = res.eta
            self.inner_iters += res.iters
        self.last = res
        return res

    def __call__(self, theta) -> float:
        return self.solve(np.atleast_1d(np.asarray(theta, dtype=float))).value


@dataclass
class GelFit:
    """Solved saddle point.

    Attributes
    ----------
    theta : ndarray
    eta : ndarray
        Multiplier of length ``r`` (``r + s`` with side functions).
    p_hat : ndarray
        Empirical probabilities.
    objective : float
        Scaled criterion at the saddle point.
    family : str
        ``el``, ``et``, ``cu`` or ``gmm``.
    f_N : float
    phi : object
        Fitted nuisance used throughout.
    weight_matrix : ndarray or None
        GMM weight matrix (scaled), None for GEL.
    """

    theta: np.ndarray
    eta: np.ndarray
    p_hat: np.ndarray
    objective: float
    inner_iters: int
    outer_iters: int
    converged: bool
    f_N: float
    family: str
    phi: Any = field(repr=False)
    include_side: bool = True
    n: int = 0
    weight_matrix: np.ndarray | None = field(default=None, repr=False)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "eta": self.eta.tolist(),
            "objective": self.objective,
            "inner_iters": self.inner_iters,
            "outer_iters": self.outer_iters,
            "converged": self.converged,
            "f_N": self.f_N,
            "family": self.family,
            "message": self.message,
        }


def gel_objective(sample, system, theta, eta, family, phi=None, *, include_side: bool = True) -> float:
    """Scaled GEL criterion at ``(theta, eta)``; ``-inf`` signals an out-of-domain ``eta``."""
    fam = get_family(family)
    phi = system.fit_nuisance(sample) if phi is None else phi
    prof = Profile(sample, system, fam, phi, include_side=include_side)
    u = prof.scaled_moments(as_theta(theta, system.p))
    return _value(u, np.atleast_1d(np.asarray(eta, dtype=float)), fam)


def inner_max_eta(sample, system, theta, family, phi=None, *, include_side: bool = True):
    """Maximize the criterion over ``eta`` at fixed ``theta``.

    Returns
    -------
    eta : ndarray
    objective : float
        ``+inf`` for EL when zero is outside the convex hull of ``d_i psi_i``.
    """
    phi = system.fit_nuisance(sample) if phi is None else phi
    res = Profile(sample, system, family, phi, include_side=include_side).solve(as_theta(theta, system.p))
    return res.eta, res.value


def _probabilities(u: np.ndarray, eta: np.ndarray, fam: RhoFamily) -> np.ndarray:
    r1 = fam.rho1(u @ eta)
    return r1 / r1.sum()


def empirical_probabilities(fit: GelFit, sample: SurveySample, system: EstimatingSystem, family=None) -> np.ndarray:
    """``p_i = rho1(eta' d_i psi_i) / sum_j rho1(eta' d_j psi_j)`` at the saddle point."""
    family = fit.family if family is None else family
    if family == "gmm":
        return np.full(sample.n, 1.0 / sample.n)
    prof = Profile(sample, system, family, fit.phi, include_side=fit.include_side)
    return _probabilities(prof.scaled_moments(fit.theta), fit.eta, get_family(family))


def solve_moment_root(sample, system, phi, *, include_side: bool = False):
    """Root of ``U_hat(theta, phi) = 0`` for a just-identified system, or None.

    Affine systems are solved from two evaluations; other scalar systems by
    Brent's method on ``Theta``; vector systems by a Powell hybrid solve.
    """
    lo, hi = system.theta_bounds[:, 0], system.theta_bounds[:, 1]
    w = sample.weights / sample.N

    def U(theta):
        return w @ system.moments(sample.z, theta, phi, include_side=include_side)

    if system.p == 1:
        if system.linear:
            u0, u1 = U(np.zeros(1))[0], U(np.ones(1))[0]
            slope = u1 - u0
            if slope == 0:
                return None
            t = -u0 / slope
            return np.array([t]) if lo[0] <= t <= hi[0] else None
        f_lo, f_hi = U(lo)[0], U(hi)[0]
        if f_lo == 0:
            return lo.copy()
        if np.sign(f_lo) == np.sign(f_hi):
            return None
        return np.array([brentq(lambda t: U(np.array([t]))[0], lo[0], hi[0], xtol=1e-14, rtol=1e-14)])
    from scipy.optimize import root

    sol = root(U, 0.5 * (lo + hi), method="hybr", tol=1e-13)
    if sol.success and np.all(sol.x >= lo) and np.all(sol.x <= hi):
        return sol.x
    return None


def _scalar_outer(profile: Callable, lo: float, hi: float, start=None, grid: int = 41):
    """Grid scan, then bounded Brent (golden-section fallback) around the best cell."""
    xs = np.linspace(lo, hi, grid)
    vals = np.array([min(profile(np.array([x])), _PROFILE_CAP) for x in xs])
    if start is not None:
        j = int(np.argmin(np.abs(xs - start)))
        if min(profile(np.array([start])), _PROFILE_CAP) <= vals.min():
            xs, vals = np.append(xs, start), np.append(vals, profile(np.array([start])))
    j = int(np.argmin(vals))  # argmin returns the smallest index among ties
    x0 = xs[j]
    step = (hi - lo) / (grid - 1)
    a, b = max(lo, x0 - step), min(hi, x0 + step)
    res = minimize_scalar(
        lambda t: min(profile(np.array([t])), _PROFILE_CAP),
        bounds=(a, b),
        method="bounded",
        options={"xatol": 1e-9 * (hi - lo), "maxiter": 500},
    )
    best_x, best_v = (res.x, res.fun) if res.fun <= vals[j] else (x0, vals[j])
    return np.array([best_x]), float(best_v), grid + res.nfev, bool(res.success)


def _vector_outer(profile: Callable, bounds: np.ndarray, start, restarts: int = 5, seed: int = 0):
    lo, hi = bounds[:, 0], bounds[:, 1]

    def f(t):
        if np.any(t < lo) or np.any(t > hi):
            return _PROFILE_CAP
        return min(profile(t), _PROFILE_CAP)

    starts = [np.clip(start, lo, hi)]
    halton = qmc.Halton(d=bounds.shape[0], scramble=False, seed=seed).random(restarts + 1)[1:]
    starts.extend(lo + halton * (hi - lo))
    scored = sorted(((f(s), i) for i, s in enumerate(starts)))
    x = starts[scored[0][1]]
    nfev = len(starts)
    opts = {"xatol": 1e-9 * float(np.max(hi - lo)), "fatol": 1e-14, "maxfev": 500, "maxiter": 500}
    res = minimize(f, x, method="Nelder-Mead", options=opts)
    nfev += res.nfev
    # one restart from the solution guards against a collapsed simplex
    res2 = minimize(f, res.x, method="Nelder-Mead", options=opts)
    nfev += res2.nfev
    best = res2 if res2.fun <= res.fun else res
    return best.x, float(best.fun), nfev, bool(best.fun < _PROFILE_CAP and (res.success or res2.success))


def fit_gel(
    sample: SurveySample,
    system: EstimatingSystem,
    family="el",
    theta0=None,
    *,
    phi=None,
    include_side: bool = True,
    force_outer: bool = False,
) -> GelFit:
    """Two-step GEL estimator.

    Parameters
    ----------
    sample : SurveySample
    system : EstimatingSystem
    family : {"el", "et", "cu"} or RhoFamily
    theta0 : array_like, optional
        Starting value for the outer search.
    phi : object, optional
        Pre-fitted nuisance; estimated from ``sample`` when omitted.
    include_side : bool, default True
        Use the side functions ``q`` when the system has them.
    force_outer : bool, default False
        Skip the just-identified shortcut.  When there are as many moments as
        parameters the GEL estimator is the root of ``U_hat = 0`` (where the
        profile attains its minimum of zero), which is found directly unless
        this flag is set.

    Returns
    -------
    GelFit
    """
    fam = get_family(family)
    phi = system.fit_nuisance(sample) if phi is None else phi
    prof = Profile(sample, system, fam, phi, include_side=include_side)
    m = system.n_moments(include_side)
    theta, outer, ok, msg = None, 0, True, ""
    if m == system.p and not force_outer:
        theta = solve_moment_root(sample, system, phi, include_side=include_side)
        outer = 1
    if theta is None:
        bounds = system.theta_bounds
        if system.p == 1:
            cu = Profile(sample, system, CU, phi, include_side=include_side)
            start, _, n1, _ = _scalar_outer(cu, bounds[0, 0], bounds[0, 1], theta0)
            if fam is CU:
                theta, outer = start, n1
            else:
                width = (bounds[0, 1] - bounds[0, 0]) / 40
                a, b = max(bounds[0, 0], start[0] - width), min(bounds[0, 1], start[0] + width)
                theta, _, n2, ok = _scalar_outer(prof, a, b, start[0], grid=9)
                outer = n1 + n2
        else:
            cu = Profile(sample, system, CU, phi, include_side=include_side)
            x0 = bounds.mean(axis=1) if theta0 is None else as_theta(theta0, system.p)
            start, _, n1, _ = _vector_outer(cu, bounds, x0)
            if fam is CU:
                theta, outer = start, n1
            else:
                theta, _, n2, ok = _vector_outer(prof, bounds, start)
                outer = n1 + n2
        if not ok:
            msg = "outer minimization did not converge"
    res = prof.solve(theta)
    converged = ok and res.converged and math.isfinite(res.value)
    if not res.converged:
        msg = msg or ("inner maximization failed" + (" (zero outside convex hull)" if res.hull_failure else ""))
    eta = res.eta if res.converged else np.full(m, math.nan)
    p_hat = (
        _probabilities(prof.scaled_moments(theta), eta, fam) if res.converged else np.full(sample.n, math.nan)
    )
    return GelFit(
        theta=np.asarray(theta, dtype=float),
        eta=eta,
        p_hat=p_hat,
        objective=float(res.value),
        inner_iters=prof.inner_iters,
        outer_iters=outer,
        converged=converged,
        f_N=sample.f_N,
        family=fam.kind,
        phi=phi,
        include_side=include_side,
        n=sample.n,
        message=msg,
    )


def fit_gmm(
    sample: SurveySample,
    system: EstimatingSystem,
    theta_tilde=None,
    *,
    phi=None,
    include_side: bool = True,
) -> GelFit:
    """Two-step GMM: minimize ``U_hat' W_hat(theta_tilde)^{-1} U_hat``.

    The objective is reported as ``0.5 ubar' W^{-1} ubar`` on the scaled
    moments, the same scale as the CU criterion, so that
    ``2 n (objective(theta) - objective(theta_hat))`` is the GMM ratio
    statistic.  ``theta_tilde`` defaults to the just-identified root when it
    exists and to the identity-weighted minimizer otherwise.

    Raises
    ------
    SingularMatrixError
        If the weight matrix at ``theta_tilde`` is singular.
    """
    phi = system.fit_nuisance(sample) if phi is None else phi
    m = system.n_moments(include_side)
    d = scaled_weights(sample)

    def scaled(theta):
        return d[:, None] * system.moments(sample.z, theta, phi, include_side=include_side)

    if theta_tilde is None:
        theta_tilde = solve_moment_root(sample, system, phi, include_side=include_side) if m == system.p else None
        if theta_tilde is None:
            ident = Profile(sample, system, "cu", phi, include_side=include_side, weight_matrix=np.eye(m))
            if system.p == 1:
                theta_tilde = _scalar_outer(ident, *system.theta_bounds[0])[0]
            else:
                theta_tilde = _vector_outer(ident, system.theta_bounds, system.theta_bounds.mean(axis=1))[0]
    theta_tilde = as_theta(theta_tilde, system.p)
    u = scaled(theta_tilde)
    W = u.T @ u / sample.n
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError(f"GMM weight matrix is singular (condition number {cond:.3g})")
    prof = Profile(sample, system, None, phi, include_side=include_side, weight_matrix=W)
    theta = solve_moment_root(sample, system, phi, include_side=include_side) if m == system.p else None
    ok, outer = True, 1
    if theta is None:
        if system.p == 1:
            theta, _, outer, ok = _scalar_outer(prof, *system.theta_bounds[0], start=theta_tilde[0])
        else:
            theta, _, outer, ok = _vector_outer(prof, system.theta_bounds, theta_tilde)
    res = prof.solve(theta)
    return GelFit(
        theta=np.asarray(theta, dtype=float),
        eta=res.eta,
        p_hat=np.full(sample.n, 1.0 / sample.n),
        objective=res.value,
        inner_iters=0,
        outer_iters=outer,
        converged=ok,
        f_N=sample.f_N,
        family="gmm",
        phi=phi,
        include_side=include_side,
        n=sample.n,
        weight_matrix=W,
        message="" if ok else "outer minimization did not converge",
    )


def profile_for(fit: GelFit, sample: SurveySample, system: EstimatingSystem) -> Profile:
    """Profile object matching ``fit`` (same family, nuisance and GMM weights)."""
    return Profile(
        sample,
        system,
        None if fit.family == "gmm" else fit.family,
        fit.phi,
        include_side=fit.include_side,
        weight_matrix=fit.weight_matrix,
    )


def ensure_converged(fit: GelFit) -> GelFit:
    if not fit.converged:
        raise ConvergenceError(f"{fit.family} fit did not converge: {fit.message}")
    return fit
