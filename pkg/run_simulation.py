"""
Run the HTE / SRE Monte Carlo study and write its result tables.

Usage:
    python run_simulation.py                       # desk grid, 198 scenarios, M=2000
    python run_simulation.py --full                # M=10000
    python run_simulation.py --variances 2100 --n 1280 --M 10000
    python run_simulation.py --config lab.conf --out results/

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import io
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dotenv.parser import parse_stream

from config import FULL_REPLICATES, OUTPUT_DIR, VERSION, RunConfig, env_master_seed
from errors import ConfigurationError, LabError, UsageError
from export_results import (
    BIAS_TABLE_FILE,
    MANIFEST_FILE,
    emit_bias_table,
    emit_figure_data,
    write_manifest,
)
from montecarlo import (
    HTE_LABEL,
    SRE_CORR_LABEL,
    GridResult,
    build_populations,
    minimum_sample_size,
    run_grid,
)

logger = logging.getLogger(__name__)

LIST_FIELDS = {"variances": float, "sample_sizes": int, "r2_values": float}
SCALAR_FIELDS = {
    "replicates": int,
    "master_seed": int,
    "output_dir": Path,
    "grid_rows": int,
    "grid_cols": int,
    "range_x": float,
    "range_delta": float,
    "target_mean": float,
    "alpha": float,
    "workers": int,
    "block_size": int,
}
CONFIG_ALIASES = {
    "n": "sample_sizes",
    "M": "replicates",
    "seed": "master_seed",
    "r2": "r2_values",
    "out": "output_dir",
}


class LabArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> LabArgumentParser:
    parser = LabArgumentParser(description="Monte Carlo study of HTE and SRE for SOC stock MRV")
    parser.add_argument("--variances", dest="variances", nargs="+",
                        help="Population variances Var(Z), space- or comma-separated (default: 100..2100 step 400)")
    parser.add_argument("--n", dest="sample_sizes", nargs="+",
                        help="Sample sizes (default: 5, 10, ..., 5120)")
    parser.add_argument("--r2", dest="r2_values", nargs="+",
                        help="Covariate r2 values: 0 for the uncorrelated covariate, at most one positive value (default: 0 0.3)")
    parser.add_argument("--M", dest="replicates",
                        help="Monte Carlo replicates per scenario, at least 2 (default: 2000)")
    parser.add_argument("--seed", dest="master_seed",
                        help="Master seed (default: MRV_LAB_SEED, then 1729)")
    parser.add_argument("--out", dest="output_dir",
                        help=f"Output directory (default: {OUTPUT_DIR})")
    parser.add_argument("--grid-rows", dest="grid_rows", help="Population grid rows (default: 512)")
    parser.add_argument("--grid-cols", dest="grid_cols", help="Population grid columns (default: 512)")
    parser.add_argument("--range-x", dest="range_x", help="Covariance range of X in cells (default: 40)")
    parser.add_argument("--range-delta", dest="range_delta", help="Covariance range of Delta in cells (default: 15)")
    parser.add_argument("--target-mean", dest="target_mean", help="True population mean in tC/ha (default: 1.0)")
    parser.add_argument("--alpha", dest="alpha", help="Significance level (default: 0.05)")
    parser.add_argument("--workers", dest="workers", help="Worker processes (default: CPU count)")
    parser.add_argument("--block-size", dest="block_size", help="Replicates per vectorized block (default: 250)")
    parser.add_argument("--full", action="store_true", help=f"Use {FULL_REPLICATES} replicates per scenario")
    parser.add_argument("--config", type=Path, help="key = value config file; flags override it")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    return parser


def _cast(key: str, raw, source: str):
    """Convert flag or file text to the RunConfig field type."""
    if isinstance(raw, (list, tuple)):
        raw = ",".join(raw)
    text = str(raw).strip()
    try:
        if key in LIST_FIELDS:
            items = [item.strip() for item in text.split(",") if item.strip()]
            if not items:
                raise ValueError("empty list")
            values = [LIST_FIELDS[key](item) for item in items]
        else:
            if not text:
                raise ValueError("empty value")
            values = [SCALAR_FIELDS[key](text)]
    except ValueError as exc:
        raise UsageError(f"malformed value for {key} ({source}): {text!r} ({exc})")

    if any(isinstance(v, float) and not math.isfinite(v) for v in values):
        raise UsageError(f"{key} ({source}) must be finite: {text!r}")
    return values if key in LIST_FIELDS else values[0]


def read_config_file(path) -> dict:
    """
    Parse flat `key = value` lines (# comments allowed) into typed values.

    Keys are RunConfig field names or the aliases n, M, seed, r2, out.
    Malformed values raise UsageError here, before any flag is merged.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")

    values = {}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise UsageError(f"{path}:{line}: cannot parse {binding.original.string.strip()!r}")
        if binding.key is None:
            continue
        key = CONFIG_ALIASES.get(binding.key, binding.key)
        if key not in LIST_FIELDS and key not in SCALAR_FIELDS:
            raise UsageError(f"{path}:{line}: unknown key {binding.key!r}")
        if binding.value is None:
            raise UsageError(f"{path}:{line}: {binding.key} has no value")
        if key in values:
            raise UsageError(f"{path}:{line}: {key} is set twice")
        values[key] = _cast(key, binding.value, f"{path}:{line}")
    return values


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """
    Resolve flags, config file, MRV_LAB_SEED and defaults into a RunConfig.

    Flags beat the file; the seed falls back to the environment before the
    built-in default.
    """
    file_values = read_config_file(args.config) if args.config else {}

    resolved = {}
    for key in list(LIST_FIELDS) + list(SCALAR_FIELDS):
        flag_value = getattr(args, key)
        if flag_value is not None:
            resolved[key] = _cast(key, flag_value, "flag")
        elif key in file_values:
            resolved[key] = file_values[key]

    if "master_seed" not in resolved:
        env_seed = env_master_seed()
        if env_seed is not None:
            resolved["master_seed"] = env_seed

    if args.full:
        if resolved.get("replicates", FULL_REPLICATES) != FULL_REPLICATES:
            raise UsageError(f"--full sets M={FULL_REPLICATES} but M={resolved['replicates']} was also given")
        resolved["replicates"] = FULL_REPLICATES

    try:
        return RunConfig(**resolved)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


def parse_config(argv=None) -> RunConfig:
    return config_from_args(build_parser().parse_args(argv))


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


@dataclass
class RunSummary:
    """Closing report of one run."""
    config: RunConfig
    result: GridResult
    minimum_sizes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def _pooled_coverage(self, n: int) -> Optional[float]:
        rows = [row.coverage for row in self.result.metrics if row.sample_size == n]
        return sum(rows) / len(rows) if rows else None

    def print_summary(self):
        metrics = self.result.metrics
        print("\n" + "=" * 70)
        print("📊 SIMULATION SUMMARY")
        print("=" * 70)

        print("\n🧪 SCENARIOS")
        print(f"   Completed:        {len(metrics)}")
        print(f"   Failed:           {len(self.result.failures)}")
        print(f"   Replicates (M):   {self.config.replicates}")
        print(f"   Wall time:        {self.result.elapsed_seconds:.1f}s")

        significant = [row for row in metrics if row.significant]
        hte_significant = [row for row in significant if row.label == HTE_LABEL]
        print("\n📐 BIAS t-TESTS")
        print(f"   Significant:      {len(significant)}/{len(metrics)} (HTE: {len(hte_significant)})")

        print("\n🎯 COVERAGE (pooled over variances)")
        for n in sorted(self.config.sample_sizes):
            pooled = self._pooled_coverage(n)
            if pooled is not None:
                print(f"   n={n:<6}          {pooled:.3f}")

        gains = [row.precision_gain for row in metrics
                 if row.label == SRE_CORR_LABEL and row.sample_size >= 40 and row.precision_gain is not None]
        if gains:
            print("\n📉 PRECISION GAIN (SRE-corr, n >= 40)")
            print(f"   Range:            {min(gains):.3f} .. {max(gains):.3f}")

        if self.minimum_sizes:
            print("\n📏 MINIMUM SAMPLE SIZE (coverage and bias OK for all larger n)")
            for label, n in self.minimum_sizes.items():
                print(f"   {label:<17} {n if n is not None else 'none'}")

        print("\n" + "=" * 70)
        for path in self.outputs:
            print(f"💾 {path}")
        if self.result.failures:
            print(f"⚠️  {len(self.result.failures)} scenario(s) failed; see {MANIFEST_FILE}")
        print("=" * 70 + "\n")


def print_banner(config: RunConfig):
    scenarios = len(config.variances) * len(config.sample_sizes) * (1 + len(config.r2_values))
    print("🌱 SOC MRV Simulation Lab")
    print(f"   Version: {VERSION}")
    print(f"   Scenarios: {scenarios} (M={config.replicates})")
    print(f"   Variances: {', '.join(f'{v:g}' for v in config.variances)}")
    print(f"   Sample sizes: {', '.join(str(n) for n in config.sample_sizes)}")
    print(f"   r2: {', '.join(f'{r:g}' for r in config.r2_values)}")
    print(f"   Grid: {config.grid_rows}x{config.grid_cols}, ranges X={config.range_x:g} Delta={config.range_delta:g}")
    print(f"   Master seed: {config.master_seed}")
    print(f"   Workers: {config.workers}")
    print()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = config_from_args(args)
        config.check_sampling_fraction()
    except (UsageError, ConfigurationError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        print(f"   Run {parser.prog} --help for usage", file=sys.stderr)
        return 2

    configure_logging(verbose=args.verbose, quiet=args.quiet)
    if not args.quiet:
        print_banner(config)

    try:
        populations = build_populations(config, progress=not args.quiet)
        result = run_grid(config, populations, progress=not args.quiet)
        if not result.metrics:
            print("❌ Every scenario failed; nothing to write", file=sys.stderr)
            for failure in result.failures:
                print(f"   {failure}", file=sys.stderr)
            return 1

        minimum_sizes = minimum_sample_size(result.metrics)
        outputs = [emit_bias_table(result.metrics, config.output_dir / BIAS_TABLE_FILE)]
        outputs += emit_figure_data(result.metrics, config.output_dir, alpha=config.alpha).values()
        outputs.append(write_manifest(config, result, populations, config.output_dir / MANIFEST_FILE, minimum_sizes))
    except KeyboardInterrupt:
        print("\n\n⚠️ Interrupted! No result files were written.", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 2
    except (LabError, OSError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return 1

    if not args.quiet:
        RunSummary(config, result, minimum_sizes, outputs).print_summary()
    return 1 if result.failures else 0


if __name__ == "__main__":
    sys.exit(main())
