"""
Run configuration for the MRV simulation lab.

Defaults reproduce the desk-scale scenario grid: six population variances,
eleven sample sizes, an uncorrelated and a correlated covariate, and 2000
Monte Carlo replicates per scenario.
"""

import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigurationError

# Load environment variables
load_dotenv()

VERSION = "0.3.0"

# Paths
SCRIPT_DIR = Path(__file__).parent
OUTPUT_DIR = SCRIPT_DIR / "output"

# Scenario grid
DEFAULT_VARIANCES = (100.0, 500.0, 900.0, 1300.0, 1700.0, 2100.0)
DEFAULT_SAMPLE_SIZES = (5, 10, 20, 40, 80, 160, 320, 640, 1280, 2560, 5120)
DEFAULT_R2_VALUES = (0.0, 0.3)

DESK_REPLICATES = 2000
FULL_REPLICATES = 10000

# Population geometry (grid-cell units)
DEFAULT_GRID_ROWS = 512
DEFAULT_GRID_COLS = 512
DEFAULT_RANGE_X = 40.0
DEFAULT_RANGE_DELTA = 15.0
DEFAULT_TARGET_MEAN = 1.0

# Each population must hold at least this many cells per sampled cell
MIN_CELLS_PER_SAMPLE = 50

DEFAULT_ALPHA = 0.05
DEFAULT_BLOCK_SIZE = 250
DEFAULT_MASTER_SEED = 1729

SEED_ENV_VAR = "MRV_LAB_SEED"


def env_master_seed() -> Optional[int]:
    """Master seed from MRV_LAB_SEED, or None when unset."""
    raw = os.getenv(SEED_ENV_VAR)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration."""
    variances: tuple = DEFAULT_VARIANCES
    sample_sizes: tuple = DEFAULT_SAMPLE_SIZES
    r2_values: tuple = DEFAULT_R2_VALUES
    replicates: int = DESK_REPLICATES
    master_seed: int = DEFAULT_MASTER_SEED
    output_dir: Path = OUTPUT_DIR
    grid_rows: int = DEFAULT_GRID_ROWS
    grid_cols: int = DEFAULT_GRID_COLS
    range_x: float = DEFAULT_RANGE_X
    range_delta: float = DEFAULT_RANGE_DELTA
    target_mean: float = DEFAULT_TARGET_MEAN
    alpha: float = DEFAULT_ALPHA
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        # Normalize list-like inputs so configs compare and hash cleanly
        object.__setattr__(self, "variances", tuple(float(v) for v in self.variances))
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "r2_values", tuple(float(r) for r in self.r2_values))
        object.__setattr__(self, "output_dir", Path(self.output_dir))

        if not self.variances or not self.sample_sizes or not self.r2_values:
            raise ConfigurationError("variances, sample sizes and r2 values must be non-empty")
        if any(v <= 0 for v in self.variances):
            raise ConfigurationError(f"population variances must be positive: {self.variances}")
        if len(set(self.variances)) != len(self.variances):
            raise ConfigurationError(f"duplicate population variances: {self.variances}")
        if any(n < 2 for n in self.sample_sizes):
            raise ConfigurationError(f"sample sizes must be at least 2: {self.sample_sizes}")
        if len(set(self.sample_sizes)) != len(self.sample_sizes):
            raise ConfigurationError(f"duplicate sample sizes: {self.sample_sizes}")
        if any(not 0.0 <= r < 1.0 for r in self.r2_values):
            raise ConfigurationError(f"r2 values must lie in [0, 1): {self.r2_values}")
        if len(set(self.r2_values)) != len(self.r2_values):
            raise ConfigurationError(f"duplicate r2 values: {self.r2_values}")
        if len(self.positive_r2_values) > 1:
            raise ConfigurationError(
                f"at most one positive r2 value is supported per run, got {self.positive_r2_values}"
            )
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigurationError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")
        # bias t-test and MC variance need two replicates
        if self.replicates < 2:
            raise ConfigurationError(f"replicates must be >= 2, got {self.replicates}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.block_size < 1:
            raise ConfigurationError(f"block_size must be >= 1, got {self.block_size}")
        if self.range_x <= 0 or self.range_delta <= 0:
            raise ConfigurationError("covariance ranges must be positive")

    @property
    def positive_r2_values(self) -> tuple:
        return tuple(r for r in self.r2_values if r > 0.0)

    @property
    def population_r2(self) -> float:
        """Target r2 of the simulated populations (0 when only the uncorrelated covariate runs)."""
        positive = self.positive_r2_values
        return positive[0] if positive else 0.0

    @property
    def population_cells(self) -> int:
        return self.grid_rows * self.grid_cols

    def check_sampling_fraction(self):
        """Enforce N >= 50 * n_max so the FPC-free variance formulas stay honest."""
        n_max = max(self.sample_sizes)
        if self.population_cells < MIN_CELLS_PER_SAMPLE * n_max:
            raise ConfigurationError(
                f"grid {self.grid_rows}x{self.grid_cols} has {self.population_cells} cells; "
                f"sample size {n_max} needs at least {MIN_CELLS_PER_SAMPLE * n_max}"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["output_dir"] = str(self.output_dir)
        data["variances"] = list(self.variances)
        data["sample_sizes"] = list(self.sample_sizes)
        data["r2_values"] = list(self.r2_values)
        return data
