import numpy as np
import pytest

from augswee.designs import (
    DesignSpec,
    draw,
    draw_poisson,
    draw_rao_sampford_pps,
    draw_srswor,
    draw_stratified,
    draw_systematic_pps,
    draw_two_stage_cluster,
    pps_probabilities,
)
from augswee.exceptions import DesignError, RetryBudgetExceeded
from augswee.population import FinitePopulation, assign_clusters, assign_strata


@pytest.fixture
def pop20():
    rng = np.random.default_rng(8)
    return FinitePopulation(z=rng.gamma(2, 2, 20), x=rng.uniform(1, 3, 20))


def inclusion_frequency(sampler, N, R):
    counts = np.zeros(N)
    for r in range(R):
        s = sampler(r)
        counts[s.unit_id - 1] += 1
    return counts / R


class TestSRSWOR:
    def test_size_and_pi(self, pop20):
        s = draw_srswor(pop20, 5, seed=0)
        assert s.n == 5 and np.all(s.pi == 0.25)
        assert np.unique(s.unit_id).size == 5

    def test_n_equals_N(self, pop20):
        s = draw_srswor(pop20, 20, seed=0)
        assert s.unit_id.tolist() == list(range(1, 21))

    def test_too_large(self, pop20):
        with pytest.raises(DesignError, match="exceeds"):
            draw_srswor(pop20, 21, seed=0)


class TestPPS:
    def test_certainty_units_are_named(self):
        pop = FinitePopulation(z=np.ones(5), x=[1, 1, 1, 1, 20])
        with pytest.raises(DesignError, match="unit\\(s\\) 5"):
            draw_systematic_pps(pop, 2, seed=0)
        with pytest.raises(DesignError, match="certainty"):
            draw_rao_sampford_pps(pop, 2, seed=0)

    def test_probabilities(self):
        np.testing.assert_allclose(pps_probabilities([1, 2, 3, 4], 2), [0.2, 0.4, 0.6, 0.8])

    def test_systematic_frequencies(self, pop20):
        freq = inclusion_frequency(lambda r: draw_systematic_pps(pop20, 6, seed=r), 20, 20000)
        pi = pps_probabilities(pop20.x, 6)
        se = np.sqrt(pi * (1 - pi) / 20000)
        assert np.all(np.abs(freq - pi) < 4 * se)

    def test_systematic_fixed_size(self, pop20):
        for r in range(200):
            s = draw_systematic_pps(pop20, 7, seed=r)
            assert s.n == 7 and np.unique(s.unit_id).size == 7

    @pytest.mark.parametrize("method", ["rejective", "conditional_poisson"])
    def test_sampford_frequencies(self, pop20, method):
        R = 20000
        freq = inclusion_frequency(
            lambda r: draw_rao_sampford_pps(pop20, 5, seed=r, method=method), 20, R
        )
        pi = pps_probabilities(pop20.x, 5)
        se = np.sqrt(pi * (1 - pi) / R)
        assert np.all(np.abs(freq - pi) < 4 * se)

    def test_sampford_budget(self):
        pop = FinitePopulation(z=np.ones(6), x=[1, 1, 1, 1, 1, 4.9])
        with pytest.raises(RetryBudgetExceeded, match="rejected 1 proposals"):
            # one proposal is almost never accepted with pi_max near 1
            for seed in range(50):
                draw_rao_sampford_pps(pop, 2, seed=seed, method="rejective", budget=1)

    def test_sampford_n_equal_N(self, pop20):
        with pytest.raises(DesignError):
            draw_rao_sampford_pps(pop20, 20, seed=0)


class TestPoisson:
    def test_expected_size(self, pop20):
        pi = np.full(20, 0.3)
        s = draw_poisson(pop20, pi, seed=1)
        assert s.expected_n == pytest.approx(6.0)
        assert s.design == "Poisson"

    def test_rejects_bad_probabilities(self, pop20):
        with pytest.raises(DesignError):
            draw_poisson(pop20, np.full(20, 1.2), seed=1)

    def test_never_empty(self, pop20):
        for r in range(200):
            assert draw_poisson(pop20, np.full(20, 0.01), seed=r).n >= 1


class TestStratified:
    def test_labels_and_sizes(self, pop20):
        pop = assign_strata(pop20, [8, 12])
        spec = [(1, DesignSpec("SRSWOR", n=2)), (2, DesignSpec("SystematicPPS", n=3))]
        s = draw_stratified(pop, spec, seed=4)
        assert s.n == 5 and s.strata_sizes == {1: 8.0, 2: 12.0}
        assert np.all(s.pi[s.stratum == 1] == 0.25)
        assert np.all(pop.stratum[s.unit_id - 1] == s.stratum)

    def test_errors_name_the_stratum(self, pop20):
        pop = assign_strata(pop20, [8, 12])
        with pytest.raises(DesignError, match="stratum 1"):
            draw_stratified(pop, [(1, DesignSpec("SRSWOR", n=9)), (2, DesignSpec("SRSWOR", n=1))], seed=0)
        with pytest.raises(DesignError, match="unknown stratum"):
            draw_stratified(pop, [(3, DesignSpec("SRSWOR", n=1))], seed=0)
        with pytest.raises(DesignError, match="no design"):
            draw_stratified(pop, [(1, DesignSpec("SRSWOR", n=1))], seed=0)

    def test_reproducible(self, pop20):
        pop = assign_strata(pop20, [10, 10])
        spec = DesignSpec("Stratified", strata=[(1, DesignSpec("SRSWOR", n=3)), (2, DesignSpec("SRSWOR", n=3))])
        a, b = draw(pop, spec, seed=12), draw(pop, spec, seed=12)
        assert np.array_equal(a.unit_id, b.unit_id)


class TestCluster:
    def test_self_weighting(self, pop20):
        pop = assign_clusters(pop20, [4, 4, 6, 6])
        s = draw_two_stage_cluster(pop, 2, 3, seed=0)
        assert s.n == 6 and np.allclose(s.pi, 6 / 20)
        assert np.unique(s.cluster).size == 2

    def test_m_too_large(self, pop20):
        pop = assign_clusters(pop20, [4, 4, 6, 6])
        with pytest.raises(DesignError, match="smallest cluster"):
            draw_two_stage_cluster(pop, 2, 5, seed=0)

    def test_needs_labels(self, pop20):
        with pytest.raises(DesignError, match="cluster labels"):
            draw_two_stage_cluster(pop20, 2, 2, seed=0)


class TestDesignSpec:
    def test_round_trip(self):
        spec = DesignSpec("stratified", strata=[(1, DesignSpec("srs", n=3)), (2, DesignSpec("rao_sampford", n=4))])
        assert DesignSpec.from_dict(spec.to_dict()) == spec
        assert spec.kind == "Stratified"

    def test_unknown(self):
        with pytest.raises(DesignError):
            DesignSpec("bernoulli")
        with pytest.raises(DesignError, match="unknown design fields"):
            DesignSpec.from_dict({"kind": "SRSWOR", "size": 3})
