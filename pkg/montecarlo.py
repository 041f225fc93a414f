"""
Monte Carlo evaluation of HTE and SRE over a grid of populations and sample sizes.

Work is organised in cells of (population variance, sample size). Every
replicate of a cell draws one simple random sample, and all estimators of the
cell (HTE, SRE with the correlated covariate, SRE with the uncorrelated one)
are evaluated on that same sample. Replicate m of a cell gets its own Philox
stream keyed by (master seed, variance, n, m), so results do not depend on how
cells are spread over worker processes.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Optional

import numpy as np
from tqdm import tqdm

from config import RunConfig
from errors import (
    ArgumentError,
    ConfigurationError,
    DegenerateInputError,
    InsufficientReplicatesError,
    LabError,
    ScenarioError,
)
from estimators import Method, confidence_bounds, hte_batch, sre_batch, t_quantile, t_two_sided_p_value
from geofield import Population, PopulationSpec, build_population
from sampling import partial_fisher_yates

logger = logging.getLogger(__name__)

HTE_LABEL = "HTE"
SRE_CORR_LABEL = "SRE-corr"
SRE_UNCORR_LABEL = "SRE-uncorr"

# Population attribute holding each SRE covariate and its population mean
COVARIATES = {
    SRE_CORR_LABEL: ("x", "xbar_pop"),
    SRE_UNCORR_LABEL: ("x_uncorr", "xbar_uncorr_pop"),
}

# Spawn-key namespaces keep population and replicate streams apart
POPULATION_STREAM = 0
REPLICATE_STREAM = 1


# =============================================================================
# SCENARIOS
# =============================================================================

@dataclass(frozen=True)
class ScenarioSpec:
    population_variance: float
    r2: float
    sample_size: int
    estimator: Method
    replicates: int
    master_seed: int

    def __post_init__(self):
        object.__setattr__(self, "estimator", Method(self.estimator))
        if self.population_variance <= 0:
            raise ConfigurationError(f"population variance must be positive, got {self.population_variance}")
        if not 0.0 <= self.r2 < 1.0:
            raise ConfigurationError(f"r2 must lie in [0, 1), got {self.r2}")
        if self.estimator is Method.HTE and self.r2 != 0.0:
            raise ConfigurationError("HTE uses no covariate; its r2 must be 0")
        if self.sample_size < 1:
            raise ConfigurationError(f"sample size must be positive, got {self.sample_size}")
        if self.replicates < 1:
            raise ConfigurationError(f"replicates must be >= 1, got {self.replicates}")

    @property
    def label(self) -> str:
        if self.estimator is Method.HTE:
            return HTE_LABEL
        return SRE_CORR_LABEL if self.r2 > 0 else SRE_UNCORR_LABEL

    @property
    def scenario_id(self) -> str:
        return f"V{self.population_variance:g}-n{self.sample_size}-{self.label}"


@dataclass(frozen=True)
class ReplicateRecord:
    estimate: float
    variance_estimate: float
    ci_lower: float
    ci_upper: float
    covered: bool


@dataclass(frozen=True)
class ReplicateArrays:
    """Per-replicate results of one scenario, as parallel arrays."""
    estimates: np.ndarray
    variance_estimates: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    covered: np.ndarray
    covered_naive: Optional[np.ndarray] = None

    def records(self) -> list:
        return [
            ReplicateRecord(float(e), float(v), float(lo), float(hi), bool(c))
            for e, v, lo, hi, c in zip(self.estimates, self.variance_estimates,
                                       self.ci_lower, self.ci_upper, self.covered)
        ]


@dataclass
class ScenarioMetrics:
    scenario: ScenarioSpec
    mu: float
    empirical_bias: float
    t_statistic: float
    p_value: float
    significant: bool
    critical_value: float
    coverage: float
    coverage_mc_se: float
    mc_sampling_variance: float
    mean_variance_estimate: float
    precision_gain: Optional[float] = None
    coverage_naive: Optional[float] = None
    expected_gain: float = 1.0
    r2_realized: float = 0.0

    @property
    def population_variance(self) -> float:
        return self.scenario.population_variance

    @property
    def r2(self) -> float:
        return self.scenario.r2

    @property
    def sample_size(self) -> int:
        return self.scenario.sample_size

    @property
    def estimator(self) -> Method:
        return self.scenario.estimator

    @property
    def label(self) -> str:
        return self.scenario.label


@dataclass
class GridResult:
    """Metrics rows in plan order plus the scenarios that failed."""
    metrics: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    elapsed_seconds: float = 0.0

    def __iter__(self):
        return iter(self.metrics)

    def __len__(self):
        return len(self.metrics)


def plan_scenarios(config: RunConfig) -> list:
    """Scenarios in output order: per (variance, n), HTE then SRE by ascending r2."""
    specs = []
    for variance in config.variances:
        for n in config.sample_sizes:
            specs.append(ScenarioSpec(variance, 0.0, n, Method.HTE, config.replicates, config.master_seed))
            for r2 in sorted(config.r2_values):
                specs.append(ScenarioSpec(variance, r2, n, Method.SRE, config.replicates, config.master_seed))
    return specs


# =============================================================================
# SEEDING
# =============================================================================

def _variance_key(variance: float) -> int:
    return int(round(variance * 1000))


def population_seed(master_seed: int, variance: float) -> int:
    """64-bit seed of the population simulated for one variance level."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(POPULATION_STREAM, _variance_key(variance)))
    return int(seq.generate_state(1, np.uint64)[0])


def replicate_rng(master_seed: int, variance: float, n: int, m: int) -> np.random.Generator:
    """Counter-based generator for replicate m of cell (variance, n)."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(REPLICATE_STREAM, _variance_key(variance), n, m))
    return np.random.Generator(np.random.Philox(seq))


def draw_sample_block(population_size: int, n: int, master_seed: int, variance: float, replicate_ids) -> np.ndarray:
    """(replicates, n) matrix of sampled cell ids."""
    return np.vstack([
        partial_fisher_yates(population_size, n, replicate_rng(master_seed, variance, n, m))
        for m in replicate_ids
    ])


# =============================================================================
# METRICS
# =============================================================================

def _sample_variance(values: np.ndarray) -> tuple:
    mean = math.fsum(values) / values.size
    centered = values - mean
    return mean, math.fsum(centered * centered) / (values.size - 1)


def mc_sampling_variance(estimates) -> float:
    """Monte Carlo variance of the estimates (divisor M-1)."""
    estimates = np.asarray(estimates, dtype=float).ravel()
    if estimates.size < 2:
        raise InsufficientReplicatesError(f"MC variance needs M >= 2, got M={estimates.size}")
    return _sample_variance(estimates)[1]


def empirical_bias(estimates, mu: float) -> tuple:
    """
    Mean deviation from mu and its two-sided one-sample t-test.

    Returns:
        (bias, t_statistic, p_value) with M-1 degrees of freedom
    """
    estimates = np.asarray(estimates, dtype=float).ravel()
    replicates = estimates.size
    if replicates < 2:
        raise InsufficientReplicatesError(f"bias t-test needs M >= 2, got M={replicates}")

    deviations = estimates - mu
    bias, variance = _sample_variance(deviations)
    std_error = math.sqrt(variance / replicates)
    if std_error == 0.0:
        if bias == 0.0:
            return 0.0, 0.0, 1.0
        t_statistic = math.copysign(math.inf, bias)
    else:
        t_statistic = bias / std_error
    return bias, t_statistic, t_two_sided_p_value(t_statistic, replicates - 1)


def bias_critical_value(estimates, alpha: float = 0.05) -> float:
    """Rejection boundary of the bias t-test, t_{1-alpha/2, M-1} * s / sqrt(M)."""
    estimates = np.asarray(estimates, dtype=float).ravel()
    if estimates.size < 2:
        raise InsufficientReplicatesError(f"critical value needs M >= 2, got M={estimates.size}")
    _, variance = _sample_variance(estimates)
    return t_quantile(1.0 - alpha / 2.0, estimates.size - 1) * math.sqrt(variance / estimates.size)


def _coverage(covered: np.ndarray) -> tuple:
    replicates = covered.size
    if replicates == 0:
        raise ArgumentError("coverage needs at least one replicate")
    coverage = int(np.count_nonzero(covered)) / replicates
    return coverage, math.sqrt(coverage * (1.0 - coverage) / replicates)


def empirical_coverage(records) -> tuple:
    """(share of replicates whose interval covers mu, binomial MC standard error)."""
    return _coverage(np.array([record.covered for record in records], dtype=bool))


def precision_gain(sre_estimates, hte_estimates) -> float:
    """Ratio of MC sampling variances, SRE over HTE, on paired replicates."""
    sre_estimates = np.asarray(sre_estimates, dtype=float).ravel()
    hte_estimates = np.asarray(hte_estimates, dtype=float).ravel()
    if sre_estimates.size != hte_estimates.size:
        raise ArgumentError("precision gain needs paired estimates of equal length")
    hte_variance = mc_sampling_variance(hte_estimates)
    if hte_variance == 0.0:
        raise DegenerateInputError("HTE Monte Carlo variance is zero; precision gain is undefined")
    return mc_sampling_variance(sre_estimates) / hte_variance


def summarize_scenario(spec: ScenarioSpec, results: ReplicateArrays, population: Population,
                       alpha: float = 0.05, hte_estimates=None) -> ScenarioMetrics:
    """Reduce one scenario's replicates to its metrics row."""
    bias, t_statistic, p_value = empirical_bias(results.estimates, population.mu)
    coverage, coverage_se = _coverage(results.covered)

    gain = None
    if spec.estimator is Method.SRE and hte_estimates is not None:
        gain = precision_gain(results.estimates, hte_estimates)

    coverage_naive = None
    if results.covered_naive is not None:
        coverage_naive = _coverage(results.covered_naive)[0]

    r2_realized = population.r2_realized if spec.label == SRE_CORR_LABEL else 0.0
    return ScenarioMetrics(
        scenario=spec,
        mu=population.mu,
        empirical_bias=bias,
        t_statistic=t_statistic,
        p_value=p_value,
        significant=p_value < alpha,
        critical_value=bias_critical_value(results.estimates, alpha),
        coverage=coverage,
        coverage_mc_se=coverage_se,
        mc_sampling_variance=mc_sampling_variance(results.estimates),
        mean_variance_estimate=math.fsum(results.variance_estimates) / results.variance_estimates.size,
        precision_gain=gain,
        coverage_naive=coverage_naive,
        expected_gain=1.0 - r2_realized,
        r2_realized=r2_realized,
    )


def minimum_sample_size(metrics, coverage_floor: float = 0.93) -> dict:
    """
    Smallest n per estimator label from which every larger grid n has
    coverage >= coverage_floor and no significant bias test, across all
    variances. None when even the largest n fails.
    """
    by_label = {}
    for row in metrics:
        ok = row.coverage >= coverage_floor and not row.significant
        cell = by_label.setdefault(row.label, {})
        cell[row.sample_size] = cell.get(row.sample_size, True) and ok

    summary = {}
    for label, passed in by_label.items():
        smallest = None
        for n in sorted(passed, reverse=True):
            if not passed[n]:
                break
            smallest = n
        summary[label] = smallest
    return summary


# =============================================================================
# SIMULATION
# =============================================================================

class _Collector:
    def __init__(self, with_naive: bool):
        self.parts = {"estimates": [], "variance_estimates": [], "ci_lower": [], "ci_upper": [], "covered": []}
        self.naive = [] if with_naive else None

    def add(self, point, variance, lower, upper, covered, covered_naive=None):
        for key, values in zip(self.parts, (point, variance, lower, upper, covered)):
            self.parts[key].append(values)
        if self.naive is not None:
            self.naive.append(covered_naive)

    def finish(self) -> ReplicateArrays:
        arrays = {key: np.concatenate(values) for key, values in self.parts.items()}
        naive = np.concatenate(self.naive) if self.naive is not None else None
        return ReplicateArrays(covered_naive=naive, **arrays)


def simulate_cell(population: Population, variance: float, n: int, labels, replicates: int,
                  master_seed: int, alpha: float = 0.05, block_size: int = 250) -> dict:
    """
    Run all replicates of one (variance, n) cell for the given estimator labels.

    Replicates are processed in blocks of block_size samples; every label
    sees the same samples. Returns {label: ReplicateArrays or LabError}.
    """
    unknown = [label for label in labels if label != HTE_LABEL and label not in COVARIATES]
    if unknown:
        raise ArgumentError(f"unknown estimator labels: {unknown}")

    mu = population.mu
    collectors = {label: _Collector(with_naive=label != HTE_LABEL) for label in labels}
    failures = {}

    for start in range(0, replicates, block_size):
        stop = min(start + block_size, replicates)
        cells = draw_sample_block(population.size, n, master_seed, variance, range(start, stop))
        z = population.z[cells]

        for label in labels:
            if label in failures:
                continue
            try:
                if label == HTE_LABEL:
                    point, var = hte_batch(z)
                    lower, upper = confidence_bounds(point, var, n - 1, alpha)
                    naive_flags = None
                else:
                    column, mean_attr = COVARIATES[label]
                    result = sre_batch(getattr(population, column)[cells], z, getattr(population, mean_attr))
                    point, var = result.point, result.variance_gweight
                    lower, upper = confidence_bounds(point, var, n - 2, alpha)
                    naive_lower, naive_upper = confidence_bounds(point, result.variance_naive, n - 2, alpha)
                    naive_flags = (naive_lower <= mu) & (mu <= naive_upper)
                covered = (lower <= mu) & (mu <= upper)
                collectors[label].add(point, var, lower, upper, covered, naive_flags)
            except LabError as exc:
                failures[label] = exc

    return {label: failures.get(label) or collectors[label].finish() for label in labels}


def _check_population(spec: ScenarioSpec, population: Population):
    if population.spec is None:
        return
    if not math.isclose(population.spec.target_var_z, spec.population_variance, rel_tol=1e-12):
        raise ConfigurationError(
            f"population has Var(Z)={population.spec.target_var_z:g}, scenario expects {spec.population_variance:g}"
        )
    if spec.label == SRE_CORR_LABEL and not math.isclose(population.spec.target_r2, spec.r2, abs_tol=1e-12):
        raise ConfigurationError(
            f"population has r2={population.spec.target_r2:g}, scenario expects {spec.r2:g}"
        )


def run_scenario(spec: ScenarioSpec, pop: Population, alpha: float = 0.05, block_size: int = 250) -> list:
    """All replicate records of one scenario."""
    _check_population(spec, pop)
    outcome = simulate_cell(pop, spec.population_variance, spec.sample_size, [spec.label],
                            spec.replicates, spec.master_seed, alpha, block_size)[spec.label]
    if isinstance(outcome, Exception):
        raise ScenarioError(spec.scenario_id, outcome)
    return outcome.records()


def _evaluate_cell(population: Population, specs: tuple, alpha: float, block_size: int) -> list:
    """Metrics (or ScenarioError) for each scenario of one cell, in the order of specs."""
    first = specs[0]
    started = time.perf_counter()
    outcomes = simulate_cell(
        population, first.population_variance, first.sample_size, [spec.label for spec in specs],
        first.replicates, first.master_seed, alpha, block_size,
    )

    hte = outcomes.get(HTE_LABEL)
    hte_estimates = hte.estimates if isinstance(hte, ReplicateArrays) else None

    rows = []
    for spec in specs:
        outcome = outcomes[spec.label]
        try:
            if isinstance(outcome, Exception):
                raise outcome
            _check_population(spec, population)
            rows.append(summarize_scenario(spec, outcome, population, alpha, hte_estimates))
        except LabError as exc:
            rows.append(ScenarioError(spec.scenario_id, exc))

    logger.debug("Cell V=%g n=%d done in %.2fs", first.population_variance, first.sample_size,
                 time.perf_counter() - started)
    return rows


_WORKER_POPULATIONS = {}


def _init_worker(populations: dict):
    global _WORKER_POPULATIONS
    _WORKER_POPULATIONS = populations


def _run_cell_task(task) -> tuple:
    index, specs, alpha, block_size = task
    population = _WORKER_POPULATIONS[specs[0].population_variance]
    return index, _evaluate_cell(population, specs, alpha, block_size)


def build_populations(config: RunConfig, progress: bool = False) -> dict:
    """One population per variance level, all sharing the run's r2 and geometry."""
    populations = {}
    for variance in tqdm(config.variances, desc="Populations", unit="pop", disable=not progress):
        spec = PopulationSpec.from_targets(
            target_var_z=variance,
            target_r2=config.population_r2,
            seed=population_seed(config.master_seed, variance),
            target_mean=config.target_mean,
            grid_rows=config.grid_rows,
            grid_cols=config.grid_cols,
            range_x=config.range_x,
            range_delta=config.range_delta,
        )
        spec.check_sample_size(max(config.sample_sizes))
        populations[variance] = build_population(spec)
    return populations


def run_grid(config: RunConfig, populations: Optional[dict] = None, progress: bool = False) -> GridResult:
    """
    Evaluate every planned scenario.

    Failed scenarios are logged and collected as ScenarioError in
    GridResult.failures; the remaining scenarios still run. Output order and
    values are independent of config.workers.
    """
    started = time.perf_counter()
    config.check_sampling_fraction()
    if populations is None:
        populations = build_populations(config, progress=progress)

    plan = plan_scenarios(config)
    cells = {}
    for spec in plan:
        cells.setdefault((spec.population_variance, spec.sample_size), []).append(spec)
    tasks = [(index, tuple(specs), config.alpha, config.block_size) for index, specs in enumerate(cells.values())]

    results = [None] * len(tasks)
    workers = min(config.workers, len(tasks))
    logger.info("Running %d scenarios in %d cells (M=%d, %d worker%s)",
                len(plan), len(tasks), config.replicates, workers, "" if workers == 1 else "s")

    with tqdm(total=len(tasks), desc="Scenario cells", unit="cell", disable=not progress) as bar:
        if workers <= 1:
            _init_worker(populations)
            for task in tasks:
                index, rows = _run_cell_task(task)
                results[index] = rows
                bar.update(1)
        else:
            with Pool(workers, initializer=_init_worker, initargs=(populations,)) as pool:
                for index, rows in pool.imap_unordered(_run_cell_task, tasks):
                    results[index] = rows
                    bar.update(1)

    grid = GridResult()
    for rows in results:
        for row in rows:
            if isinstance(row, ScenarioError):
                logger.warning("Scenario %s failed: %s", row.scenario_id, row.cause)
                grid.failures.append(row)
            else:
                grid.metrics.append(row)
    grid.elapsed_seconds = time.perf_counter() - started
    return grid
