"""scikit-learn style front end."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_level, check_probabilities
from .estfun import EstimatingSystem, build_system
from .gel import ensure_converged, fit_gel, fit_gmm
from .inference import ci_invert, gel_ratio
from .population import SurveySample
from .variance import variance_report

__all__ = ["AugmentedGEL"]


class AugmentedGEL(BaseEstimator):
    """Augmented two-step GEL estimator of an inequality measure.

    Parameters
    ----------
    measure : {"quantile_share", "lorenz", "gini"}, default="quantile_share"
    tau1, tau2 : float
        Quantile levels of a share cell.
    tau : float
        Lorenz ordinate level.
    family : {"el", "et", "cu", "gmm"}, default="el"
    augmented : bool, default=True
        False fits the conventional two-step equations.
    omega : str, default="auto"
        Estimator of ``Omega`` for standard errors.
    level : float, default=0.95
    gamma_B : int, default=200
        Perturbations used for the Jacobian.
    random_state : int, optional
    system : EstimatingSystem, optional
        Custom system, overriding ``measure``.

    Attributes
    ----------
    theta_ : ndarray
    eta_ : ndarray
    p_hat_ : ndarray
    fit_ : GelFit
    sample_ : SurveySample
    system_ : EstimatingSystem

    Examples
    --------
    >>> import numpy as np
    >>> est = AugmentedGEL(tau1=0.0, tau2=0.5).fit(np.arange(1.0, 9.0), pi=np.full(8, 0.1))
    >>> float(est.theta_[0])
    0.2777777777777778
    """

    def __init__(
        self,
        measure="quantile_share",
        tau1=0.0,
        tau2=0.25,
        tau=0.5,
        family="el",
        augmented=True,
        omega="auto",
        level=0.95,
        gamma_B=200,
        random_state=None,
        system=None,
    ):
        self.measure = measure
        self.tau1 = tau1
        self.tau2 = tau2
        self.tau = tau
        self.family = family
        self.augmented = augmented
        self.omega = omega
        self.level = level
        self.gamma_B = gamma_B
        self.random_state = random_state
        self.system = system

    def _make_system(self) -> EstimatingSystem:
        if self.system is not None:
            return self.system.with_augmented(self.augmented)
        config = {"measure": self.measure, "augmented": bool(self.augmented)}
        if self.measure == "quantile_share":
            config.update(tau1=self.tau1, tau2=self.tau2)
        elif self.measure == "lorenz":
            config["tau"] = self.tau
        return build_system(config)

    def _as_sample(self, X, pi, population_size, design) -> SurveySample:
        if isinstance(X, SurveySample):
            return X
        z = check_array(X, ensure_2d=False, dtype=np.float64)
        if z.ndim == 2:
            if z.shape[1] != 1:
                raise ValueError(f"expected a single column of values; got {z.shape[1]} columns")
            z = z[:, 0]
        if pi is None:
            raise ValueError("inclusion probabilities `pi` are required with array input")
        pi = check_probabilities(pi, z.shape[0])
        N = float(np.sum(1.0 / pi)) if population_size is None else float(population_size)
        return SurveySample(z=z, pi=pi, N=N, design=design)

    def fit(self, X, y=None, pi=None, *, population_size=None, design=None):
        """Fit to values ``X`` with inclusion probabilities ``pi``, or to a
        :class:`SurveySample` passed as ``X``."""
        sample = self._as_sample(X, pi, population_size, design)
        system = self._make_system()
        fam = str(self.family).lower()
        if fam == "gmm":
            fit = fit_gmm(sample, system)
        else:
            fit = fit_gel(sample, system, fam)
        ensure_converged(fit)
        self.sample_ = sample
        self.system_ = system
        self.fit_ = fit
        self.theta_ = fit.theta
        self.eta_ = fit.eta
        self.p_hat_ = fit.p_hat
        self.n_features_in_ = 1
        self._variance = None
        return self

    def variance(self):
        """Sandwich variance report (computed once, then cached)."""
        check_is_fitted(self, "fit_")
        if self._variance is None:
            self._variance = variance_report(
                self.sample_, self.system_, self.fit_, omega=self.omega,
                gamma_B=self.gamma_B, seed=self.random_state,
            )
        return self._variance

    @property
    def se_(self) -> np.ndarray:
        return self.variance().se

    def confidence_interval(self, level=None):
        """Ratio-statistic interval at ``level`` (defaults to ``self.level``)."""
        check_is_fitted(self, "fit_")
        level = check_level(self.level if level is None else level)
        return ci_invert(self.sample_, self.system_, self.fit_.family, level, fit=self.fit_)

    def ratio_test(self, theta, calibration="auto"):
        """GEL ratio test of ``theta_N = theta``."""
        check_is_fitted(self, "fit_")
        var = self.variance() if calibration != "chi2" else None
        return gel_ratio(self.sample_, self.system_, self.fit_.family, theta, fit=self.fit_,
                         calibration=calibration, variance=var)

    def transform(self, X):
        """Augmented estimating functions ``psi(z, theta_hat, phi_hat)`` for ``X``."""
        check_is_fitted(self, "fit_")
        z = check_array(X, ensure_2d=False, dtype=np.float64).reshape(-1)
        return self.system_.psi(z, self.theta_, self.fit_.phi)
