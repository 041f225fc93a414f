"""
Write simulation results as CSV tables and a JSON run manifest.

bias_table.csv mirrors the published bias t-test table; bias.csv,
coverage.csv and gain.csv are plot-ready series keyed by
(population_variance, sample_size, estimator). All values are preformatted
strings, so files are byte-identical for identical metrics regardless of
locale.
"""

import json
import logging
import subprocess
from pathlib import Path

import pandas as pd

from config import SCRIPT_DIR, VERSION
from errors import ArgumentError
from estimators import Method

logger = logging.getLogger(__name__)

BIAS_TABLE_FILE = "bias_table.csv"
BIAS_FILE = "bias.csv"
COVERAGE_FILE = "coverage.csv"
GAIN_FILE = "gain.csv"
MANIFEST_FILE = "run_manifest.json"

BIAS_TABLE_COLUMNS = [
    "population_variance", "r2_score", "sample_size", "estimator",
    "empirical_bias", "t_statistic", "p_value", "statistically_significant",
]
BIAS_COLUMNS = [
    "population_variance", "r2_score", "sample_size", "estimator",
    "empirical_bias", "critical_value", "critical_lower", "critical_upper",
    "t_statistic", "p_value", "statistically_significant",
]
COVERAGE_COLUMNS = [
    "population_variance", "r2_score", "sample_size", "estimator",
    "coverage", "coverage_mc_se", "coverage_naive", "nominal_coverage",
    "mean_variance_estimate", "mc_sampling_variance",
]
GAIN_COLUMNS = [
    "population_variance", "r2_score", "sample_size", "estimator",
    "precision_gain", "expected_gain", "mc_sampling_variance",
]

FIGURE_DECIMALS = 6


def _fixed(value, decimals: int = FIGURE_DECIMALS) -> str:
    """Fixed-point text; empty for missing values, never '-0.000'."""
    if value is None:
        return ""
    text = f"{value:.{decimals}f}"
    if text.startswith("-") and float(text) == 0.0:
        text = text[1:]
    return text


def _flag(value: bool) -> str:
    return "TRUE" if value else "FALSE"


def _key(row) -> list:
    return [f"{row.population_variance:g}", f"{row.r2:g}", str(row.sample_size)]


def _write_rows(rows: list, columns: list, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote %d rows to %s", len(rows), path)
    return path


def emit_bias_table(metrics, path) -> Path:
    """
    Bias t-test table: estimator is HTE or SRE (the two SRE rows of a cell
    differ in r2_score); bias and t to 3 decimals, p to 4.
    """
    metrics = list(metrics)
    if not metrics:
        raise ArgumentError("no metrics to write")
    rows = [
        _key(row) + [
            row.estimator.value,
            _fixed(row.empirical_bias, 3),
            _fixed(row.t_statistic, 3),
            _fixed(row.p_value, 4),
            _flag(row.significant),
        ]
        for row in metrics
    ]
    return _write_rows(rows, BIAS_TABLE_COLUMNS, path)


def emit_figure_data(metrics, output_dir, alpha: float = 0.05, variances=None) -> dict:
    """
    Write bias.csv, coverage.csv and gain.csv.

    Args:
        metrics: ScenarioMetrics rows (non-empty)
        output_dir: target directory
        alpha: significance level; coverage.csv carries 1 - alpha as reference
        variances: optional population variances to keep; an empty selection
            still writes the headers

    Returns:
        {"bias": path, "coverage": path, "gain": path}
    """
    metrics = list(metrics)
    if not metrics:
        raise ArgumentError("no metrics to write")
    if variances is not None:
        keep = {float(v) for v in variances}
        metrics = [row for row in metrics if row.population_variance in keep]

    output_dir = Path(output_dir)
    bias_rows, coverage_rows, gain_rows = [], [], []
    for row in metrics:
        key = _key(row) + [row.label]
        bias_rows.append(key + [
            _fixed(row.empirical_bias),
            _fixed(row.critical_value),
            _fixed(-row.critical_value),
            _fixed(row.critical_value),
            _fixed(row.t_statistic),
            _fixed(row.p_value),
            _flag(row.significant),
        ])
        coverage_rows.append(key + [
            _fixed(row.coverage),
            _fixed(row.coverage_mc_se),
            _fixed(row.coverage_naive),
            _fixed(1.0 - alpha),
            _fixed(row.mean_variance_estimate),
            _fixed(row.mc_sampling_variance),
        ])
        # HTE is the reference series of the gain plot
        gain = 1.0 if row.estimator is Method.HTE else row.precision_gain
        gain_rows.append(key + [
            _fixed(gain),
            _fixed(row.expected_gain),
            _fixed(row.mc_sampling_variance),
        ])

    return {
        "bias": _write_rows(bias_rows, BIAS_COLUMNS, output_dir / BIAS_FILE),
        "coverage": _write_rows(coverage_rows, COVERAGE_COLUMNS, output_dir / COVERAGE_FILE),
        "gain": _write_rows(gain_rows, GAIN_COLUMNS, output_dir / GAIN_FILE),
    }


def load_bias_table(path) -> pd.DataFrame:
    """Read bias_table.csv back; statistically_significant parses as bool."""
    df = pd.read_csv(path)
    missing = [column for column in BIAS_TABLE_COLUMNS if column not in df.columns]
    if missing:
        raise ArgumentError(f"{path} is missing columns: {missing}")
    return df


def load_figure_data(path) -> pd.DataFrame:
    return pd.read_csv(path)


def describe_version() -> str:
    """`git describe` of the working tree, or the package version outside a checkout."""
    try:
        completed = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=SCRIPT_DIR, capture_output=True, text=True, check=True, timeout=5,
        )
        described = completed.stdout.strip()
        if described:
            return described
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{VERSION}"


def _population_summary(variance: float, population) -> dict:
    return {
        "population_variance": variance,
        "seed": population.spec.seed if population.spec is not None else None,
        "cells": population.size,
        "mu": population.mu,
        "var_z": population.var_z,
        "var_x": population.var_x,
        "var_delta": population.var_delta,
        "r2_realized": population.r2_realized,
        "xbar_pop": population.xbar_pop,
        "xbar_uncorr_pop": population.xbar_uncorr_pop,
    }


def write_manifest(config, result, populations: dict, path, minimum_sizes=None) -> Path:
    """Config echo, version, per-population statistics, failures and timing."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": describe_version(),
        "created": pd.Timestamp.now().strftime("%Y-%m-%d %H:%M:%S"),
        "master_seed": config.master_seed,
        "config": config.to_dict(),
        "scenarios_completed": len(result.metrics),
        "scenarios_failed": len(result.failures),
        "failures": [
            {"scenario_id": failure.scenario_id, "error": str(failure.cause)}
            for failure in result.failures
        ],
        "elapsed_seconds": round(result.elapsed_seconds, 3),
        "populations": [
            _population_summary(variance, population) for variance, population in populations.items()
        ],
        "minimum_sample_size": minimum_sizes or {},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    logger.info("Wrote manifest to %s", path)
    return path
