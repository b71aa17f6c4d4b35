import math

import numpy as np
import pytest

from augswee.exceptions import CSVFormatError, InvalidPopulationError
from augswee.population import (
    ColumnMap,
    FinitePopulation,
    SurveySample,
    assign_clusters,
    assign_strata,
    generate_population,
    load_sample_csv,
    rescale_weights,
    write_sample_csv,
)


class TestGeneratePopulation:
    def test_positive_support(self):
        pop = generate_population(20000, seed=7)
        assert pop.N == 20000
        assert pop.z.min() > 0.25
        assert pop.x.min() > 0.25

    def test_small_population_ids(self):
        pop = generate_population(4, seed=1)
        assert pop.ids.tolist() == [1, 2, 3, 4]
        assert [r.id for r in pop.records()] == [1, 2, 3, 4]

    def test_mean_matches_moment_formula(self):
        pop = generate_population(200000, seed=2)
        expected = 0.25 + 2 * math.gamma(1.5) + 3
        assert abs(pop.z.mean() - expected) < 0.05

    def test_mean_matches_independent_monte_carlo(self):
        # independent oracle: numpy's own Weibull and chi-square generators
        rng = np.random.default_rng(99)
        oracle = 0.25 + 2 * rng.weibull(2.0, 400000) + rng.chisquare(3, 400000)
        pop = generate_population(400000, seed=3)
        assert abs(pop.z.mean() - oracle.mean()) < 0.03
        assert abs(pop.x.std() - (2 * rng.weibull(2.0, 400000)).std()) < 0.01

    def test_bit_reproducible(self):
        a, b = generate_population(500, seed=9), generate_population(500, seed=9)
        assert np.array_equal(a.z, b.z) and np.array_equal(a.x, b.x)

    @pytest.mark.parametrize("N", [1, 0, -3])
    def test_rejects_tiny(self, N):
        with pytest.raises(InvalidPopulationError):
            generate_population(N, seed=0)

    def test_immutable(self):
        pop = generate_population(10, seed=0)
        with pytest.raises(ValueError):
            pop.z[0] = 1.0


class TestFinitePopulation:
    def test_rejects_nonpositive_size(self):
        with pytest.raises(InvalidPopulationError):
            FinitePopulation(z=[1, 2], x=[1, 0])

    def test_labels(self):
        pop = assign_strata(generate_population(10, seed=1), [4, 6])
        assert np.bincount(pop.stratum).tolist() == [0, 4, 6]
        pop = assign_clusters(pop, [5, 5])
        assert pop.cluster.tolist() == [1] * 5 + [2] * 5

    def test_label_sizes_must_partition(self):
        with pytest.raises(InvalidPopulationError):
            assign_strata(generate_population(10, seed=1), [4, 5])


class TestSurveySample:
    def test_weights_view(self):
        s = SurveySample(z=[1, 2], pi=[0.5, 0.25], N=6)
        assert s.weights.tolist() == [2.0, 4.0]
        assert s.expected_n == 2 and s.n == 2

    @pytest.mark.parametrize("pi", [[0.0, 0.5], [-1, 0.5], [np.nan, 0.5]])
    def test_rejects_bad_pi(self, pi):
        with pytest.raises(ValueError):
            SurveySample(z=[1, 2], pi=pi, N=4)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestCSV:
    def test_weights_to_pi(self, tmp_path):
        f = _write(tmp_path / "s.csv", "z,weight\n1,2\n2,2\n3,2\n")
        s = load_sample_csv(f)
        assert s.pi.tolist() == [0.5, 0.5, 0.5]
        assert s.N == 6

    def test_pi_column(self, tmp_path):
        f = _write(tmp_path / "s.csv", "z,pi,stratum\n1,0.5,1\n2,0.25,2\n")
        s = load_sample_csv(f, population_size=10)
        assert s.pi.tolist() == [0.5, 0.25] and s.N == 10
        assert s.stratum.tolist() == [1, 2]

    def test_zero_weight_names_line(self, tmp_path):
        f = _write(tmp_path / "s.csv", "z,weight\n1,2\n2,0\n")
        with pytest.raises(CSVFormatError, match="line 3"):
            load_sample_csv(f)

    def test_missing_weight_column(self, tmp_path):
        f = _write(tmp_path / "s.csv", "z,w\n1,2\n")
        with pytest.raises(CSVFormatError, match="weight"):
            load_sample_csv(f)

    def test_missing_value_column(self, tmp_path):
        f = _write(tmp_path / "s.csv", "income,weight\n1,2\n")
        with pytest.raises(CSVFormatError, match="'z'"):
            load_sample_csv(f)
        s = load_sample_csv(f, ColumnMap(z="income"))
        assert s.z.tolist() == [1.0]

    def test_empty_file(self, tmp_path):
        with pytest.raises(CSVFormatError, match="empty"):
            load_sample_csv(_write(tmp_path / "e.csv", ""))
        with pytest.raises(CSVFormatError, match="no data"):
            load_sample_csv(_write(tmp_path / "h.csv", "z,weight\n"))

    def test_non_numeric(self, tmp_path):
        f = _write(tmp_path / "s.csv", "z,weight\n1,2\nabc,2\n")
        with pytest.raises(CSVFormatError, match="line 3"):
            load_sample_csv(f)

    def test_earnings_file(self):
        from pathlib import Path

        s = load_sample_csv(Path(__file__).parent / "data" / "earnings.csv")
        assert s.n == 956

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        s = SurveySample(z=rng.gamma(2, 3, 25), pi=rng.uniform(0.01, 0.9, 25), N=500,
                         stratum=rng.integers(1, 4, 25))
        write_sample_csv(s, tmp_path / "a.csv")
        back = load_sample_csv(tmp_path / "a.csv", population_size=500)
        write_sample_csv(back, tmp_path / "b.csv")
        assert np.array_equal(back.z, s.z) and np.array_equal(back.pi, s.pi)
        assert np.array_equal(back.stratum, s.stratum) and np.array_equal(back.unit_id, s.unit_id)
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


class TestRescale:
    @pytest.mark.parametrize(
        "w, expected",
        [([1, 2, 3], [0.5, 1.0, 1.5]), ([5, 5, 5, 5], [1, 1, 1, 1]), ([10, 30], [0.5, 1.5])],
    )
    def test_examples(self, w, expected):
        s = SurveySample(z=np.arange(len(w)), pi=1 / np.asarray(w, float), N=sum(w))
        np.testing.assert_allclose(rescale_weights(s).weights, expected, rtol=1e-14)

    def test_sum_and_idempotence(self):
        rng = np.random.default_rng(1)
        s = SurveySample(z=rng.random(40), pi=rng.uniform(0.001, 0.2, 40), N=5000)
        once = rescale_weights(s)
        twice = rescale_weights(once)
        assert abs(once.weights.sum() - 40) < 1e-10
        np.testing.assert_allclose(twice.pi, once.pi, rtol=1e-14)
        np.testing.assert_allclose(once.weights / once.weights[0], s.weights / s.weights[0], rtol=1e-12)
