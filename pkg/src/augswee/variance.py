"""Design-based variance estimation for the augmented estimating equations.

All estimators evaluate ``psi`` at the fitted ``(theta_hat, phi_hat)`` and use
the scale of the dual criterion, ``n_B / N^2``, so that
``se = sqrt(diag(V2) / n_B)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._validation import check_count, check_level, make_rng
from .estfun import EstimatingSystem
from .exceptions import ConvergenceError, SingularMatrixError
from .gel import GelFit, fit_gmm, solve_moment_root
from .population import SurveySample

__all__ = [
    "VarianceReport",
    "BootstrapResult",
    "fitted_moments",
    "omega_pps_wr",
    "omega_hajek",
    "omega_stratified",
    "omega_cluster_selfweighting",
    "between_psu_variance",
    "w_hat",
    "gamma_resample",
    "sandwich_v2",
    "psd_repair",
    "select_omega",
    "variance_report",
    "restricted_variance",
    "bootstrap",
    "point_estimate",
]

OMEGA_METHODS = ("pps_wr", "hajek", "stratified", "cluster")
_NEGLIGIBLE = 0.02


def psd_repair(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero (with a warning)."""
    M = 0.5 * (np.asarray(M, dtype=float) + np.asarray(M, dtype=float).T)
    vals, vecs = np.linalg.eigh(M)
    tol = 1e-12 * max(1.0, float(np.abs(vals).max()) if vals.size else 1.0)
    if vals.size and vals.min() < -tol:
        warnings.warn(f"{name} was indefinite; negative eigenvalues clipped at 0", RuntimeWarning, stacklevel=2)
        M = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return M


def fitted_moments(sample: SurveySample, system: EstimatingSystem, fit: GelFit) -> np.ndarray:
    """``psi`` (and ``q`` when the fit used them) at the fitted values, shape ``(n, m)``."""
    return system.moments(sample.z, fit.theta, fit.phi, include_side=fit.include_side)


def _outer(X: np.ndarray, c=None) -> np.ndarray:
    return (X.T * (1.0 if c is None else c)) @ X


def _omega_pps_wr(G, sample):
    wg = G * sample.weights[:, None]
    return sample.expected_n / sample.N**2 * _outer(wg - wg.mean(axis=0))


def _hajek_part(wg, pi):
    n = wg.shape[0]
    if n < 2:
        raise ValueError("the Hajek estimator needs at least two units")
    c = n * (1.0 - pi) / (n - 1)
    if c.sum() <= 0:
        return np.zeros((wg.shape[1], wg.shape[1]))
    centre = c @ wg / c.sum()
    return _outer(wg - centre, c)


def _omega_hajek(G, sample):
    wg = G * sample.weights[:, None]
    return sample.expected_n / sample.N**2 * _hajek_part(wg, sample.pi)


def _strata_negligible(sample) -> bool:
    labels = np.unique(sample.stratum)
    for h in labels:
        mask = sample.stratum == h
        if sample.strata_sizes and int(h) in sample.strata_sizes:
            N_h = sample.strata_sizes[int(h)]
        else:
            N_h = float(np.sum(1.0 / sample.pi[mask]))
        if mask.sum() / N_h > _NEGLIGIBLE:
            return False
    return True


def _omega_stratified(G, sample, negligible=None):
    if sample.stratum is None:
        raise ValueError("stratified variance needs stratum labels")
    if negligible is None:
        negligible = _strata_negligible(sample)
    wg = G * sample.weights[:, None]
    total = np.zeros((G.shape[1], G.shape[1]))
    for h in np.unique(sample.stratum):
        mask = sample.stratum == h
        if mask.sum() < 2:
            raise ValueError(f"stratum {h} has fewer than two sampled units")
        part = wg[mask]
        if negligible:
            total += _outer(part - part.mean(axis=0))
        else:
            total += _hajek_part(part, sample.pi[mask])
    return sample.expected_n / sample.N**2 * total


def _between_psu(G, sample):
    if sample.cluster is None:
        raise ValueError("cluster variance needs PSU (cluster) labels")
    if not np.allclose(sample.pi, sample.pi[0], rtol=1e-8, atol=0):
        raise ValueError("the between-PSU estimator needs a self-weighting design (equal pi)")
    labels, inv = np.unique(sample.cluster, return_inverse=True)
    k = labels.size
    if k < 2:
        raise ValueError("the between-PSU estimator needs at least two PSUs")
    counts = np.bincount(inv, minlength=k).astype(float)
    means = np.vstack([np.bincount(inv, weights=G[:, j], minlength=k) for j in range(G.shape[1])]).T
    means /= counts[:, None]
    dev = means - means.mean(axis=0)
    return _outer(dev) / (k * (k - 1))


def _w_hat(G, sample):
    return sample.expected_n / sample.N**2 * _outer(G * sample.weights[:, None])


def omega_pps_wr(sample, system, fit) -> np.ndarray:
    """``(n/N^2) sum_i [w_i psi_i - N U_hat / n]^{(x)2}`` (with-replacement approximation)."""
    return _omega_pps_wr(fitted_moments(sample, system, fit), sample)


def omega_hajek(sample, system, fit) -> np.ndarray:
    """Hajek approximation with ``c_i = n (1 - pi_i) / (n - 1)`` and c-weighted centre."""
    return _omega_hajek(fitted_moments(sample, system, fit), sample)


def omega_stratified(sample, system, fit, negligible: bool | None = None) -> np.ndarray:
    """Sum of per-stratum contributions.

    With negligible fractions each stratum contributes
    ``sum_i (w_i psi_i - U_h)^{(x)2}`` with ``U_h`` the stratum mean of
    ``w psi``; otherwise a per-stratum Hajek term.  ``negligible=None``
    decides from ``n_h / N_h <= 0.02`` in every stratum.
    """
    return _omega_stratified(fitted_moments(sample, system, fit), sample, negligible)


def between_psu_variance(sample, system, fit) -> np.ndarray:
    """``[k(k-1)]^{-1} sum_i (G_i - G)^{(x)2}`` over PSU means ``G_i`` of ``psi``.

    This estimates the design variance of ``U_hat`` itself.
    """
    return _between_psu(fitted_moments(sample, system, fit), sample)


def omega_cluster_selfweighting(sample, system, fit) -> np.ndarray:
    """Between-PSU estimator placed on the ``Omega`` scale, ``n_B`` times
    :func:`between_psu_variance`, for self-weighting two-stage samples."""
    return sample.expected_n * _between_psu(fitted_moments(sample, system, fit), sample)


def w_hat(sample, system, fit) -> np.ndarray:
    """``(n/N^2) sum_i pi_i^{-2} psi_i psi_i'``."""
    return _w_hat(fitted_moments(sample, system, fit), sample)


def gamma_resample(
    sample: SurveySample,
    system: EstimatingSystem,
    fit: GelFit,
    B: int = 200,
    seed=None,
    *,
    scale: str = "N",
) -> np.ndarray:
    """Jacobian of ``U_hat`` in ``theta`` by random perturbation.

    With ``V_b ~ N(0, I_p)`` and ``D_b = sqrt(N) [U_hat(theta + V_b / sqrt(N)) - U_hat(theta)]``
    the estimate is the least-squares regression of ``D`` on ``V``.
    ``scale="n"`` perturbs at ``n^{-1/2}`` instead.

    Returns
    -------
    ndarray, shape (m, p)
    """
    p = system.p
    B = check_count(B, "B")
    if B < 10 * p:
        raise ValueError(f"need B >= 10 p = {10 * p} perturbations; got {B}")
    if scale not in ("N", "n"):
        raise ValueError("scale must be 'N' or 'n'")
    root = math.sqrt(sample.N if scale == "N" else sample.n)
    rng = make_rng(seed)
    w = sample.weights / sample.N
    theta = fit.theta

    def U(t):
        return w @ system.moments(sample.z, t, fit.phi, include_side=fit.include_side)

    base = U(theta)
    V = rng.standard_normal((B, p))
    D = np.vstack([root * (U(theta + v / root) - base) for v in V])
    return np.linalg.solve(V.T @ V, V.T @ D).T


def sandwich_v2(gamma: np.ndarray, w: np.ndarray, omega: np.ndarray, n_B: float):
    """``V2 = Sigma Gamma' W^{-1} Omega W^{-1} Gamma Sigma`` with ``Sigma = (Gamma' W^{-1} Gamma)^{-1}``.

    Returns
    -------
    v2 : ndarray, shape (p, p)
    se : ndarray, shape (p,)
        ``sqrt(diag(v2) / n_B)``.
    """
    gamma = np.atleast_2d(gamma)
    try:
        if np.linalg.cond(w) > 1e14:
            raise np.linalg.LinAlgError
        WiG = np.linalg.solve(w, gamma)
        Sigma = np.linalg.inv(gamma.T @ WiG)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("W_hat or Gamma' W^{-1} Gamma is singular") from None
    v2 = Sigma @ WiG.T @ omega @ WiG @ Sigma
    v2 = 0.5 * (v2 + v2.T)
    return v2, np.sqrt(np.clip(np.diag(v2), 0.0, None) / n_B)


def select_omega(sample: SurveySample) -> str:
    """Default estimator of ``Omega`` for the sample's design."""
    if sample.design == "TwoStageCluster":
        return "cluster"
    if sample.design == "Stratified":
        return "stratified"
    if sample.design is None:
        return "pps_wr"
    return "pps_wr" if sample.n / sample.N <= _NEGLIGIBLE else "hajek"


def _omega_by_name(name, G, sample):
    if name == "pps_wr":
        return _omega_pps_wr(G, sample)
    if name == "hajek":
        return _omega_hajek(G, sample)
    if name == "stratified":
        return _omega_stratified(G, sample)
    if name == "cluster":
        return sample.expected_n * _between_psu(G, sample)
    raise ValueError(f"unknown omega method {name!r}; expected one of {OMEGA_METHODS}")


@dataclass
class VarianceReport:
    omega_hat: np.ndarray
    w_hat: np.ndarray
    gamma_hat: np.ndarray
    v2_hat: np.ndarray
    se: np.ndarray
    omega_method: str
    resample_B: int
    n_B: float
    extra: dict = field(default_factory=dict)

    def delta_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``Omega^{1/2} W^{-1} Gamma Sigma Gamma' W^{-1} Omega^{1/2}``."""
        vals, vecs = np.linalg.eigh(self.omega_hat)
        root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        WiG = np.linalg.solve(self.w_hat, self.gamma_hat)
        Sigma = np.linalg.inv(self.gamma_hat.T @ WiG)
        delta = root @ WiG @ Sigma @ WiG.T @ root
        return np.sort(np.clip(np.linalg.eigvalsh(0.5 * (delta + delta.T)), 0.0, None))[::-1]

    def to_dict(self) -> dict:
        return {
            "se": self.se.tolist(),
            "omega_method": self.omega_method,
            "gamma_B": self.resample_B,
            "omega_hat": self.omega_hat.tolist(),
            "w_hat": self.w_hat.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "v2_hat": self.v2_hat.tolist(),
        }


def variance_report(
    sample: SurveySample,
    system: EstimatingSystem,
    fit: GelFit,
    *,
    omega: str = "auto",
    gamma_B: int = 200,
    seed=None,
    scale: str = "N",
) -> VarianceReport:
    """Plug-in sandwich variance with the chosen (or design-default) ``Omega``."""
    G = fitted_moments(sample, system, fit)
    method = select_omega(sample) if omega == "auto" else omega
    om = psd_repair(_omega_by_name(method, G, sample), "Omega_hat")
    W = _w_hat(G, sample)
    gamma = gamma_resample(sample, system, fit, gamma_B, seed, scale=scale)
    v2, se = sandwich_v2(gamma, W, om, sample.expected_n)
    return VarianceReport(om, W, gamma, v2, se, method, gamma_B, sample.expected_n)


def restricted_variance(
    sample: SurveySample,
    system: EstimatingSystem,
    fit_r: GelFit,
    constraint=None,
    *,
    omega: str = "auto",
    gamma_B: int = 200,
    seed=None,
) -> VarianceReport:
    """Variance of the restricted estimator with combined moments ``(psi, q)``.

    ``V^R = C Pi' W^{-1} Omega W^{-1} Pi C`` where ``Pi`` is the Jacobian of
    the combined moments, ``Sigma = (Pi' W^{-1} Pi)^{-1}`` and
    ``C = Sigma - Sigma Phi' (Phi Sigma Phi')^{-1} Phi Sigma``
    (``C = Sigma`` without a constraint).
    """
    G = fitted_moments(sample, system, fit_r)
    method = select_omega(sample) if omega == "auto" else omega
    om = psd_repair(_omega_by_name(method, G, sample), "Omega_hat")
    W = _w_hat(G, sample)
    Pi = gamma_resample(sample, system, fit_r, gamma_B, seed)
    WiP = np.linalg.solve(W, Pi)
    Sigma = np.linalg.inv(Pi.T @ WiP)
    C = Sigma
    if constraint is not None and constraint.k > 0:
        Phi = constraint.jacobian(fit_r.theta)
        C = Sigma - Sigma @ Phi.T @ np.linalg.solve(Phi @ Sigma @ Phi.T, Phi @ Sigma)
    v2 = C @ WiP.T @ om @ WiP @ C
    v2 = 0.5 * (v2 + v2.T)
    se = np.sqrt(np.clip(np.diag(v2), 0.0, None) / sample.expected_n)
    return VarianceReport(om, W, Pi, v2, se, method, gamma_B, sample.expected_n)


def point_estimate(sample: SurveySample, system: EstimatingSystem, phi=None) -> np.ndarray:
    """Estimating-equation point estimate: the root of ``U_hat = 0`` when the
    system is just identified, otherwise two-step GMM.

    Raises
    ------
    ConvergenceError
        No root inside ``Theta``, or GMM failed.
    """
    phi = system.fit_nuisance(sample) if phi is None else phi
    if system.r == system.p:
        theta = solve_moment_root(sample, system, phi)
        if theta is None:
            raise ConvergenceError("estimating equations have no root inside Theta")
        return theta
    fit = fit_gmm(sample, system, phi=phi, include_side=False)
    if not fit.converged:
        raise ConvergenceError("GMM point estimate did not converge")
    return fit.theta


def _affine_root(z, w, system):
    """Root of a scalar affine system straight from arrays (no sample object)."""
    phi = system.nuisance.fit(z, w)
    u0 = w @ system.psi(z, np.zeros(1), phi)[:, 0]
    u1 = w @ system.psi(z, np.ones(1), phi)[:, 0]
    if u1 == u0:
        return None
    t = u0 / (u0 - u1)
    lo, hi = system.theta_bounds[0]
    return np.array([t]) if lo <= t <= hi else None


@dataclass
class BootstrapResult:
    estimate: np.ndarray
    se: np.ndarray
    interval: tuple
    mode: str
    level: float
    replicates: np.ndarray = field(repr=False)
    failures: int = 0

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate.tolist(),
            "se": self.se.tolist(),
            "interval": [list(map(float, np.atleast_1d(b))) for b in self.interval],
            "mode": self.mode,
            "level": self.level,
            "B": int(self.replicates.shape[0]),
            "failures": self.failures,
        }


def _resample_index(sample: SurveySample, rng: np.random.Generator) -> np.ndarray:
    if sample.design == "TwoStageCluster" and sample.cluster is not None:
        labels = np.unique(sample.cluster)
        pick = rng.choice(labels, size=labels.size, replace=True)
        return np.concatenate([np.flatnonzero(sample.cluster == c) for c in pick])
    if sample.stratum is not None:
        parts = []
        for h in np.unique(sample.stratum):
            members = np.flatnonzero(sample.stratum == h)
            parts.append(rng.choice(members, size=members.size, replace=True))
        return np.concatenate(parts)
    return rng.integers(0, sample.n, sample.n)


def bootstrap(
    sample: SurveySample,
    system: EstimatingSystem,
    family=None,
    B: int = 500,
    mode: str = "normal",
    seed=None,
    *,
    level: float = 0.95,
) -> BootstrapResult:
    """Design-respecting with-replacement bootstrap of the point estimate.

    Units are resampled within the sample (single-stage designs), within
    strata (stratified) or as whole PSUs (two-stage cluster).  Each
    replicate refits the nuisance and the just-identified root; for a
    just-identified system this coincides with every GEL family's estimate,
    so ``family`` only labels the result.

    Parameters
    ----------
    mode : {"normal", "percentile"}
        ``normal`` returns ``theta_hat -+ z_{alpha/2} se_boot``;
        ``percentile`` the empirical ``alpha/2`` and ``1 - alpha/2``
        quantiles of the replicates.
    """
    B = check_count(B, "B")
    if B < 50:
        raise ValueError(f"bootstrap needs B >= 50; got {B}")
    if mode not in ("normal", "percentile"):
        raise ValueError("mode must be 'normal' or 'percentile'")
    level = check_level(level)
    rng = make_rng(seed)
    estimate = point_estimate(sample, system)
    reps, failures = [], 0
    w = sample.weights
    fast = system.linear and system.r == system.p == 1
    for _ in range(B):
        idx = _resample_index(sample, rng)
        try:
            theta = _affine_root(sample.z[idx], w[idx], system) if fast else None
            if theta is None:
                theta = point_estimate(sample.take(idx), system)
            reps.append(theta)
        except (ConvergenceError, ValueError, np.linalg.LinAlgError):
            failures += 1
    if failures > 0.05 * B:
        raise ConvergenceError(f"{failures} of {B} bootstrap replicates failed (more than 5%)")
    reps = np.vstack(reps)
    se = reps.std(axis=0, ddof=1)
    alpha = 1.0 - level
    if mode == "normal":
        zq = norm.ppf(1 - alpha / 2)
        interval = (estimate - zq * se, estimate + zq * se)
    else:
        interval = (np.quantile(reps, alpha / 2, axis=0), np.quantile(reps, 1 - alpha / 2, axis=0))
    return BootstrapResult(estimate, se, interval, mode, level, reps, failures)
