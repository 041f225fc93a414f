"""Tests for scenario planning, seeding, replicate simulation and metrics."""

import math
import pickle
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from config import RunConfig
from errors import (
    ArgumentError,
    ConfigurationError,
    DegenerateInputError,
    InsufficientReplicatesError,
    InsufficientSampleError,
    ScenarioError,
)
from estimators import Method, hte_batch, sre_batch
from montecarlo import (
    HTE_LABEL,
    SRE_CORR_LABEL,
    SRE_UNCORR_LABEL,
    ReplicateRecord,
    ScenarioSpec,
    build_populations,
    draw_sample_block,
    empirical_bias,
    empirical_coverage,
    mc_sampling_variance,
    minimum_sample_size,
    plan_scenarios,
    population_seed,
    precision_gain,
    replicate_rng,
    run_grid,
    run_scenario,
    simulate_cell,
)


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    return RunConfig(
        variances=(900.0,),
        sample_sizes=(5, 40),
        r2_values=(0.0, 0.3),
        replicates=200,
        master_seed=11,
        output_dir=tmp_path_factory.mktemp("grid"),
        grid_rows=96,
        grid_cols=96,
        workers=1,
        block_size=64,
    )


@pytest.fixture(scope="module")
def small_populations(small_config):
    return build_populations(small_config)


class TestEmpiricalBias:
    """Bias and its t-test."""

    def test_all_equal_mu(self):
        assert empirical_bias([3.0, 3.0, 3.0], 3.0) == (0.0, 0.0, 1.0)

    def test_symmetric_deviations(self):
        bias, t, _ = empirical_bias([1.0, 3.0, 3.0, 1.0], 2.0)
        assert bias == 0.0
        assert t == 0.0

    def test_hand_computed(self):
        bias, t, p = empirical_bias([1.0, 2.0, 3.0, 4.0], 2.0)
        assert bias == pytest.approx(0.5)
        assert t == pytest.approx(0.5 / (math.sqrt(5.0 / 3.0) / 2.0))
        assert t == pytest.approx(0.7746, abs=1e-4)
        assert p == pytest.approx(2 * stats.t.sf(t, 3), rel=1e-10)
        assert p == pytest.approx(0.495, abs=0.005)

    def test_constant_offset(self):
        bias, t, p = empirical_bias([2.0, 2.0], 1.0)
        assert bias == 1.0
        assert t == math.inf
        assert p == 0.0

    def test_too_few_replicates(self):
        with pytest.raises(InsufficientReplicatesError):
            empirical_bias([1.0], 1.0)


class TestCoverageAndGain:
    """Coverage proportion and precision gain."""

    def test_all_covered(self):
        records = [ReplicateRecord(1.0, 0.1, 0.0, 2.0, True)] * 10
        assert empirical_coverage(records) == (1.0, 0.0)

    def test_half_covered(self):
        records = [ReplicateRecord(1.0, 0.1, 0.0, 2.0, m % 2 == 0) for m in range(10_000)]
        coverage, se = empirical_coverage(records)
        assert coverage == 0.5
        assert se == pytest.approx(0.005)

    def test_empty_records(self):
        with pytest.raises(ArgumentError):
            empirical_coverage([])

    def test_identical_estimates(self):
        values = np.random.default_rng(0).normal(size=100)
        assert precision_gain(values, values) == pytest.approx(1.0)

    def test_half_scaled_estimates(self):
        hte = np.random.default_rng(1).normal(10.0, 2.0, size=100)
        assert precision_gain(0.5 * hte, hte) == pytest.approx(0.25)

    def test_zero_hte_variance(self):
        with pytest.raises(DegenerateInputError):
            precision_gain([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])

    def test_mc_variance_divisor(self):
        assert mc_sampling_variance([1.0, 2.0, 3.0, 4.0]) == pytest.approx(5.0 / 3.0)
        with pytest.raises(InsufficientReplicatesError):
            mc_sampling_variance([1.0])


class TestPlanning:
    """Scenario grid layout."""

    def test_default_grid_has_198_scenarios(self):
        specs = plan_scenarios(RunConfig(workers=1))
        assert len(specs) == 198
        assert len({spec.scenario_id for spec in specs}) == 198

    def test_cell_order(self):
        specs = plan_scenarios(RunConfig(workers=1))
        first = specs[:3]
        assert [spec.label for spec in first] == [HTE_LABEL, SRE_UNCORR_LABEL, SRE_CORR_LABEL]
        assert [spec.r2 for spec in first] == [0.0, 0.0, 0.3]
        assert all(spec.population_variance == 100.0 and spec.sample_size == 5 for spec in first)
        assert specs[-1].population_variance == 2100.0
        assert specs[-1].sample_size == 5120

    def test_single_cell(self):
        config = RunConfig(variances=(2100.0,), sample_sizes=(1280,), replicates=10000, workers=1)
        specs = plan_scenarios(config)
        assert [spec.label for spec in specs] == [HTE_LABEL, SRE_UNCORR_LABEL, SRE_CORR_LABEL]
        assert all(spec.replicates == 10000 for spec in specs)

    def test_hte_has_no_r2(self):
        with pytest.raises(ConfigurationError):
            ScenarioSpec(100.0, 0.3, 5, Method.HTE, 10, 1)


class TestSeeding:
    """Counter-based replicate streams."""

    def test_replicate_stream_reproducible(self):
        first = replicate_rng(1729, 2100.0, 40, 7).random(5)
        second = replicate_rng(1729, 2100.0, 40, 7).random(5)
        np.testing.assert_array_equal(first, second)

    def test_streams_differ(self):
        base = replicate_rng(1729, 2100.0, 40, 7).random(5)
        for args in [(1729, 2100.0, 40, 8), (1729, 1700.0, 40, 7), (1729, 2100.0, 80, 7), (1730, 2100.0, 40, 7)]:
            assert not np.array_equal(base, replicate_rng(*args).random(5))

    def test_population_seed(self):
        assert population_seed(1729, 900.0) == population_seed(1729, 900.0)
        assert population_seed(1729, 900.0) != population_seed(1729, 1300.0)
        assert 0 <= population_seed(1729, 900.0) < 2 ** 64


class TestSimulation:
    """Replicates on a small calibrated population."""

    def test_single_replicate(self, small_population):
        spec = ScenarioSpec(900.0, 0.3, 10, Method.SRE, 1, 5)
        records = run_scenario(spec, small_population)
        assert len(records) == 1
        record = records[0]
        assert record.covered == (record.ci_lower <= small_population.mu <= record.ci_upper)
        assert run_scenario(spec, small_population) == records

    def test_population_mismatch(self, small_population):
        spec = ScenarioSpec(2100.0, 0.0, 10, Method.HTE, 5, 5)
        with pytest.raises(ConfigurationError):
            run_scenario(spec, small_population)

    def test_estimators_share_samples(self, small_population):
        outcomes = simulate_cell(small_population, 900.0, 20, [HTE_LABEL, SRE_CORR_LABEL], 30, 3, block_size=8)
        cells = draw_sample_block(small_population.size, 20, 3, 900.0, range(30))
        np.testing.assert_allclose(outcomes[HTE_LABEL].estimates, small_population.z[cells].mean(axis=1))
        assert outcomes[SRE_CORR_LABEL].estimates.shape == (30,)
        assert outcomes[SRE_CORR_LABEL].covered_naive is not None
        assert outcomes[HTE_LABEL].covered_naive is None

    def test_block_size_does_not_change_results(self, small_population):
        labels = [HTE_LABEL, SRE_CORR_LABEL, SRE_UNCORR_LABEL]
        small_blocks = simulate_cell(small_population, 900.0, 10, labels, 50, 9, block_size=7)
        one_block = simulate_cell(small_population, 900.0, 10, labels, 50, 9, block_size=50)
        for label in labels:
            np.testing.assert_allclose(small_blocks[label].estimates, one_block[label].estimates, rtol=1e-12)

    def test_insufficient_sample_reported(self, small_population):
        outcomes = simulate_cell(small_population, 900.0, 2, [HTE_LABEL, SRE_CORR_LABEL], 10, 3)
        assert outcomes[HTE_LABEL].estimates.shape == (10,)
        assert isinstance(outcomes[SRE_CORR_LABEL], InsufficientSampleError)


class TestRunGrid:
    """Grid orchestration."""

    def test_rows_in_plan_order(self, small_config, small_populations):
        result = run_grid(small_config, small_populations)
        assert len(result) == 6
        assert not result.failures
        assert [(row.sample_size, row.label) for row in result] == [
            (5, HTE_LABEL), (5, SRE_UNCORR_LABEL), (5, SRE_CORR_LABEL),
            (40, HTE_LABEL), (40, SRE_UNCORR_LABEL), (40, SRE_CORR_LABEL),
        ]
        for row in result:
            assert 0.0 <= row.coverage <= 1.0
            if row.estimator is Method.SRE:
                assert row.precision_gain > 0
                assert row.coverage_naive is not None
            else:
                assert row.precision_gain is None
        corr = [row for row in result if row.label == SRE_CORR_LABEL][0]
        assert corr.expected_gain == pytest.approx(0.7, abs=1e-9)

    def test_worker_count_does_not_change_results(self, small_config, small_populations):
        single = run_grid(small_config, small_populations)
        parallel = run_grid(RunConfig(**{**small_config.to_dict(), "workers": 2}), small_populations)
        assert single.metrics == parallel.metrics

    @pytest.mark.parametrize("workers", [1, 2])
    def test_failed_scenarios_reported(self, small_populations, small_config, workers):
        overrides = {"sample_sizes": (2, 5), "replicates": 20, "workers": workers}
        config = RunConfig(**{**small_config.to_dict(), **overrides})
        result = run_grid(config, small_populations)
        assert [(row.sample_size, row.label) for row in result] == [
            (2, HTE_LABEL), (5, HTE_LABEL), (5, SRE_UNCORR_LABEL), (5, SRE_CORR_LABEL),
        ]
        assert len(result.failures) == 2
        assert all(isinstance(failure, ScenarioError) for failure in result.failures)
        assert {failure.scenario_id for failure in result.failures} == {"V900-n2-SRE-uncorr", "V900-n2-SRE-corr"}

    def test_sampling_fraction_enforced(self, small_populations, small_config):
        config = RunConfig(**{**small_config.to_dict(), "sample_sizes": (500,)})
        with pytest.raises(ConfigurationError):
            run_grid(config, small_populations)

    def test_scenario_error_pickles(self):
        error = ScenarioError("V900-n2-SRE-corr", InsufficientSampleError("n=2"))
        clone = pickle.loads(pickle.dumps(error))
        assert clone.scenario_id == "V900-n2-SRE-corr"
        assert isinstance(clone.cause, InsufficientSampleError)
        assert str(clone) == str(error)


class TestLargeSampleVariances:
    """Var(Z)=2100, r2=0.3, n=1280 on a 512x512 population."""

    @pytest.fixture(scope="class")
    def population(self):
        config = RunConfig(variances=(2100.0,), sample_sizes=(1280,), master_seed=1729, workers=1)
        return build_populations(config)[2100.0]

    def test_regression_mc_variance(self, population):
        spec = ScenarioSpec(2100.0, 0.3, 1280, Method.SRE, 2000, 1729)
        records = run_scenario(spec, population)
        estimates = [record.estimate for record in records]
        assert mc_sampling_variance(estimates) == pytest.approx(1.15, rel=0.08)

    def test_naive_variance_ratio_tracks_r2(self, population):
        cells = draw_sample_block(population.size, 1280, 1729, 2100.0, range(2000))
        z = population.z[cells]
        _, hte_variance = hte_batch(z)
        sre_variance = sre_batch(population.x[cells], z, population.xbar_pop).variance_naive
        ratio = math.fsum(sre_variance) / math.fsum(hte_variance)
        assert ratio == pytest.approx(1.0 - population.r2_realized, abs=0.02)
        assert ratio == pytest.approx(0.70, abs=0.02)


class TestMinimumSampleSize:
    """Smallest n from which all larger n pass."""

    def test_threshold(self):
        rows = [
            SimpleNamespace(label="HTE", sample_size=n, coverage=c, significant=s)
            for n, c, s in [(5, 0.73, False), (10, 0.85, False), (20, 0.94, True), (40, 0.94, False), (80, 0.95, False)]
        ]
        assert minimum_sample_size(rows) == {"HTE": 40}

    def test_none_when_largest_fails(self):
        rows = [SimpleNamespace(label="SRE-corr", sample_size=5, coverage=0.5, significant=False)]
        assert minimum_sample_size(rows) == {"SRE-corr": None}
