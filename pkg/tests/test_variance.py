import numpy as np
import pytest

from augswee.designs import DesignSpec, draw_rao_sampford_pps, draw_srswor, draw_stratified, draw_two_stage_cluster
from augswee.estfun import EstimatingSystem, NuisancePlugin, mean_system, quantile_share_system
from augswee.exceptions import ConvergenceError
from augswee.gel import fit_gel
from augswee.inference import Constraint, fit_restricted
from augswee.population import assign_clusters, assign_strata, generate_population
from augswee.variance import (
    between_psu_variance,
    bootstrap,
    gamma_resample,
    omega_cluster_selfweighting,
    omega_hajek,
    omega_pps_wr,
    omega_stratified,
    psd_repair,
    restricted_variance,
    sandwich_v2,
    select_omega,
    variance_report,
    w_hat,
)


def exp_system():
    """Smooth nonlinear test system ``g = z - exp(theta)``."""
    return EstimatingSystem(
        g=lambda z, t, phi: (z - np.exp(t[0]))[:, None],
        r=1,
        p=1,
        theta_bounds=[[-2.0, 4.0]],
        nuisance=NuisancePlugin("NoNuisance"),
        name="log_mean",
    )


@pytest.fixture(scope="module")
def pop():
    return generate_population(4000, seed=51)


@pytest.fixture(scope="module")
def srs(pop):
    return draw_srswor(pop, 400, seed=6)


class TestSandwich:
    def test_srs_mean_is_textbook(self, srs):
        # Hajek with equal pi reduces to (1 - f) s^2 / n for the mean
        system = mean_system(bounds=(0, 40))
        fit = fit_gel(srs, system, "el")
        rep = variance_report(srs, system, fit, omega="hajek", seed=0)
        f = srs.n / srs.N
        textbook = np.sqrt((1 - f) * srs.z.var(ddof=1) / srs.n)
        assert rep.se[0] == pytest.approx(textbook, rel=1e-10)

    def test_gamma_exact_for_linear(self, srs):
        system = mean_system(bounds=(0, 40))
        fit = fit_gel(srs, system, "el")
        G = gamma_resample(srs, system, fit, B=200, seed=1)
        assert G[0, 0] == pytest.approx(-srs.N_hat / srs.N, rel=1e-12)

    def test_gamma_smooth_system(self, pop):
        s = draw_rao_sampford_pps(pop, 200, seed=2)
        system = exp_system()
        fit = fit_gel(s, system, "el")
        G = gamma_resample(s, system, fit, B=200, seed=3)
        analytic = -np.exp(fit.theta[0]) * s.N_hat / s.N
        assert abs(G[0, 0] / analytic - 1) < 1e-2

    def test_gamma_needs_enough_draws(self, srs):
        system = mean_system(bounds=(0, 40))
        with pytest.raises(ValueError, match="B >= 10"):
            gamma_resample(srs, system, fit_gel(srs, system, "el"), B=5)

    def test_sandwich_identity(self):
        v2, se = sandwich_v2(np.array([[-1.0]]), np.array([[2.0]]), np.array([[3.0]]), 100)
        # Sigma = W, so V2 = Omega
        assert v2[0, 0] == pytest.approx(3.0) and se[0] == pytest.approx(np.sqrt(0.03))

    def test_pps_wr_vs_hajek(self, pop):
        s = draw_rao_sampford_pps(pop, 40, seed=9)
        system = quantile_share_system(0.25, 0.5)
        fit = fit_gel(s, system, "el")
        a, b = omega_pps_wr(s, system, fit), omega_hajek(s, system, fit)
        # Hajek includes the finite population correction
        assert 0.9 * a[0, 0] < b[0, 0] < 1.05 * a[0, 0]
        assert w_hat(s, system, fit)[0, 0] > 0

    def test_delta_eigenvalue_srs(self, srs):
        system = mean_system(bounds=(0, 40))
        rep = variance_report(srs, system, fit_gel(srs, system, "el"), omega="hajek", seed=0)
        lam = rep.delta_eigenvalues()
        f = srs.n / srs.N
        ratio = srs.z.var(ddof=1) / np.mean((srs.z - srs.z.mean()) ** 2)
        assert lam[0] == pytest.approx((1 - f) * ratio, rel=1e-10)


class TestOmegaChoice:
    def test_select(self, pop, srs):
        assert select_omega(srs) == "hajek"
        assert select_omega(draw_srswor(pop, 40, seed=0)) == "pps_wr"

    def test_stratified(self, pop):
        p2 = assign_strata(pop, [1000, 3000])
        s = draw_stratified(p2, [(1, DesignSpec("SRSWOR", n=10)), (2, DesignSpec("SRSWOR", n=30))], seed=1)
        system = quantile_share_system(0.0, 0.5)
        fit = fit_gel(s, system, "el")
        auto = omega_stratified(s, system, fit)
        assert np.allclose(auto, omega_stratified(s, system, fit, negligible=True))
        # equal pi within strata: each Hajek term is the plain term times n_h (1 - f_h) / (n_h - 1)
        G = system.psi(s.z, fit.theta, fit.phi)[:, 0] * s.weights
        oracle = 0.0
        for h, (n_h, N_h) in {1: (10, 1000), 2: (30, 3000)}.items():
            g = G[s.stratum == h]
            oracle += n_h * (1 - n_h / N_h) / (n_h - 1) * np.sum((g - g.mean()) ** 2)
        oracle *= s.expected_n / s.N**2
        assert omega_stratified(s, system, fit, negligible=False)[0, 0] == pytest.approx(oracle, rel=1e-12)
        assert variance_report(s, system, fit, seed=0).omega_method == "stratified"

    def test_cluster_scale(self, pop):
        p2 = assign_clusters(pop, [100] * 40)
        s = draw_two_stage_cluster(p2, 10, 8, seed=2)
        system = quantile_share_system(0.5, 1.0)
        fit = fit_gel(s, system, "el")
        raw = between_psu_variance(s, system, fit)
        assert np.allclose(omega_cluster_selfweighting(s, system, fit), s.expected_n * raw)
        rep = variance_report(s, system, fit, seed=0)
        assert rep.omega_method == "cluster" and rep.se[0] > 0

    def test_unknown(self, srs):
        system = mean_system(bounds=(0, 40))
        with pytest.raises(ValueError, match="unknown omega"):
            variance_report(srs, system, fit_gel(srs, system, "el"), omega="jackknife")

    def test_psd_repair(self):
        with pytest.warns(RuntimeWarning, match="indefinite"):
            M = psd_repair(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert np.linalg.eigvalsh(M).min() >= -1e-12


class TestRestrictedVariance:
    def test_pinned_component_has_zero_variance(self, pop):
        from augswee.estfun import lorenz_system, stack_systems

        s = draw_rao_sampford_pps(pop, 200, seed=5)
        joint = stack_systems(mean_system(bounds=(0, 40)), lorenz_system(0.5))
        free = fit_gel(s, joint, "el")
        con = Constraint.fix(0, free.theta[0], 2)
        fit_r = fit_restricted(s, joint, "el", con)
        rep = restricted_variance(s, joint, fit_r, con, seed=0)
        assert rep.se[0] < 1e-8 * rep.se[1]
        full = variance_report(s, joint, free, seed=0)
        assert rep.se[1] <= full.se[1] * (1 + 1e-6)


class TestBootstrap:
    def test_close_to_sandwich(self, pop):
        s = draw_rao_sampford_pps(pop, 300, seed=7)
        system = quantile_share_system(0.75, 1.0)
        boot = bootstrap(s, system, B=400, seed=1)
        sand = variance_report(s, system, fit_gel(s, system, "el"), seed=0).se[0]
        assert 0.75 < boot.se[0] / sand < 1.33
        lo, hi = boot.interval
        assert lo[0] < boot.estimate[0] < hi[0]

    def test_reproducible_and_modes(self, srs):
        system = quantile_share_system(0.0, 0.25)
        a = bootstrap(srs, system, B=60, mode="percentile", seed=3)
        b = bootstrap(srs, system, B=60, mode="percentile", seed=3)
        assert np.array_equal(a.replicates, b.replicates)
        assert a.to_dict()["B"] == 60

    def test_validation(self, srs):
        with pytest.raises(ValueError, match="B >= 50"):
            bootstrap(srs, mean_system(), B=10)
        with pytest.raises(ValueError, match="mode"):
            bootstrap(srs, mean_system(), mode="bca")

    def test_too_many_failures(self, srs):
        # Theta excludes the sample mean
        with pytest.raises(ConvergenceError, match="no root"):
            bootstrap(srs, mean_system(bounds=(100, 200)), B=50, seed=0)

    def test_cluster_resamples_psus(self, pop):
        p2 = assign_clusters(pop, [100] * 40)
        s = draw_two_stage_cluster(p2, 10, 8, seed=2)
        boot = bootstrap(s, quantile_share_system(0.0, 0.5), B=100, seed=0)
        assert boot.failures == 0 and boot.se[0] > 0
