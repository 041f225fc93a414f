"""
Synthetic SOC populations on a regular grid.

A population is the sum of a correlated ancillary field X and an independent
residual field Delta, both zero-mean Gaussian fields with spherical
covariance, shifted to a target mean. A third covariate, X_uncorr, is drawn
as iid normal noise and projected to exact zero correlation with Z.

Fields are simulated by circulant embedding on a padded torus (FFT) for
large grids and by a dense symmetric square root of the covariance matrix
for small ones. After generation the fields are calibrated so that the
population mean, variance and squared correlation hit their targets exactly.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.fft import next_fast_len
from scipy.spatial.distance import cdist

from config import (
    DEFAULT_GRID_COLS,
    DEFAULT_GRID_ROWS,
    DEFAULT_RANGE_DELTA,
    DEFAULT_RANGE_X,
    DEFAULT_TARGET_MEAN,
    MIN_CELLS_PER_SAMPLE,
)
from errors import (
    ArgumentError,
    ConfigurationError,
    DegenerateInputError,
    GridTooSmallError,
)

logger = logging.getLogger(__name__)

MIN_GRID_SIDE = 8
# Grids up to this many cells use the dense square-root method
DENSE_MAX_CELLS = 64 * 64
MAX_EMBEDDING_DOUBLINGS = 3
# Negative circulant eigenvalues smaller than this (relative to the largest) are rounding noise
EIGENVALUE_TOLERANCE = 1e-10
# Residual variance below this share of the input variance counts as "nothing left"
DEGENERATE_TOLERANCE = 1e-12


# =============================================================================
# COVARIANCE MODEL
# =============================================================================

@dataclass(frozen=True)
class CovarianceSpec:
    """Spherical covariance parameters: sill (variance), range (cells), nugget."""
    sill: float
    range: float
    nugget: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.sill) or self.sill < 0:
            raise ConfigurationError(f"sill must be finite and >= 0, got {self.sill}")
        if not math.isfinite(self.range) or self.range <= 0:
            raise ConfigurationError(f"range must be finite and > 0, got {self.range}")
        if self.nugget != 0.0:
            raise ConfigurationError(f"nugget effects are not supported, got nugget={self.nugget}")


def spherical_cov(h, spec: CovarianceSpec):
    """
    Spherical covariance C(h) = sill * (1 - 1.5 h/a + 0.5 (h/a)^3) for h < a, else 0.

    Accepts a scalar or an array of non-negative distances. C(0) = sill + nugget.
    """
    distances = np.asarray(h, dtype=float)
    if np.any(np.isnan(distances)) or np.any(distances < 0):
        raise ArgumentError("distances must be non-negative")

    ratio = distances / spec.range
    cov = np.where(ratio < 1.0, spec.sill * (1.0 - 1.5 * ratio + 0.5 * ratio ** 3), 0.0)
    cov = np.where(distances == 0.0, spec.sill + spec.nugget, cov)

    if cov.ndim == 0:
        return float(cov)
    return cov


def spherical_semivariogram(h, spec: CovarianceSpec):
    """gamma(h) = C(0) - C(h)."""
    return spec.sill + spec.nugget - spherical_cov(h, spec)


# =============================================================================
# FIELD GENERATION
# =============================================================================

def _check_grid(rows: int, cols: int):
    if rows < MIN_GRID_SIDE or cols < MIN_GRID_SIDE:
        raise GridTooSmallError(
            f"grid {rows}x{cols} is too small; both sides need at least {MIN_GRID_SIDE} cells"
        )


def _embedding_eigenvalues(spec: CovarianceSpec, m_rows: int, m_cols: int) -> np.ndarray:
    """Eigenvalues of the block-circulant covariance on an m_rows x m_cols torus."""
    i = np.arange(m_rows)
    j = np.arange(m_cols)
    wrapped_i = np.minimum(i, m_rows - i)
    wrapped_j = np.minimum(j, m_cols - j)
    base = spherical_cov(np.hypot(wrapped_i[:, None], wrapped_j[None, :]), spec)
    # base is even in both axes, so its DFT is real
    return np.real(np.fft.fft2(base))


def circulant_embedding(spec: CovarianceSpec, rows: int, cols: int):
    """
    Find a non-negative circulant embedding for a rows x cols grid.

    The torus is padded by at least the covariance range on each axis so that
    wrapped distances never alias into the cropped block. If the embedding has
    materially negative eigenvalues the torus is doubled, up to
    MAX_EMBEDDING_DOUBLINGS times.

    Returns:
        (eigenvalues, (m_rows, m_cols)) with eigenvalues clipped at zero
    """
    _check_grid(rows, cols)
    reach = int(math.ceil(spec.range))
    m_rows = next_fast_len(rows + reach)
    m_cols = next_fast_len(cols + reach)

    for _ in range(MAX_EMBEDDING_DOUBLINGS + 1):
        eigenvalues = _embedding_eigenvalues(spec, m_rows, m_cols)
        largest = float(eigenvalues.max())
        if float(eigenvalues.min()) >= -EIGENVALUE_TOLERANCE * max(largest, 0.0):
            logger.debug("Circulant embedding %dx%d for %dx%d grid (range %.1f)",
                         m_rows, m_cols, rows, cols, spec.range)
            return np.clip(eigenvalues, 0.0, None), (m_rows, m_cols)
        logger.debug("Embedding %dx%d has negative eigenvalues, doubling", m_rows, m_cols)
        m_rows = next_fast_len(2 * m_rows)
        m_cols = next_fast_len(2 * m_cols)

    raise GridTooSmallError(
        f"no non-negative circulant embedding found for a {rows}x{cols} grid with range "
        f"{spec.range}; use a larger grid or a shorter range"
    )


def _dense_covariance_root(spec: CovarianceSpec, rows: int, cols: int) -> np.ndarray:
    """Symmetric square root of the full cell-by-cell covariance matrix."""
    cell_rows, cell_cols = np.divmod(np.arange(rows * cols), cols)
    coords = np.column_stack((cell_rows, cell_cols)).astype(float)
    cov = spherical_cov(cdist(coords, coords), spec)
    eigenvalues, eigenvectors = linalg.eigh(cov)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T


def generate_field(spec: CovarianceSpec, rows: int, cols: int, seed, method: str = "auto") -> np.ndarray:
    """
    Simulate a zero-mean Gaussian random field with spherical covariance.

    Args:
        spec: covariance parameters
        rows, cols: grid size in cells (both >= 8)
        seed: anything numpy.random.default_rng accepts (int, SeedSequence, Generator)
        method: "auto", "circulant" or "dense"; "auto" picks dense for grids
            of at most 64x64 cells

    Returns:
        (rows, cols) float array, deterministic given seed
    """
    _check_grid(rows, cols)
    if spec.sill == 0.0:
        return np.zeros((rows, cols))

    if method == "auto":
        method = "dense" if rows * cols <= DENSE_MAX_CELLS else "circulant"

    rng = np.random.default_rng(seed)

    if method == "circulant":
        eigenvalues, (m_rows, m_cols) = circulant_embedding(spec, rows, cols)
        noise = rng.standard_normal((m_rows, m_cols))
        field = np.real(np.fft.ifft2(np.sqrt(eigenvalues) * np.fft.fft2(noise)))
        return np.ascontiguousarray(field[:rows, :cols])

    if method == "dense":
        root = _dense_covariance_root(spec, rows, cols)
        noise = rng.standard_normal(rows * cols)
        return (root @ noise).reshape(rows, cols)

    raise ArgumentError(f"unknown field method {method!r}; use 'auto', 'circulant' or 'dense'")


# =============================================================================
# POPULATIONS
# =============================================================================

def _mean(values: np.ndarray) -> float:
    return math.fsum(values) / values.size


def _variance(values: np.ndarray) -> float:
    """Population variance (divisor N), compensated summation."""
    centered = values - _mean(values)
    return math.fsum(centered * centered) / values.size


def _covariance(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum((a - _mean(a)) * (b - _mean(b))) / a.size


def _frozen(values) -> np.ndarray:
    array = np.array(values, dtype=float).ravel()
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PopulationSpec:
    """Targets and geometry of one synthetic SOC population."""
    grid_rows: int
    grid_cols: int
    target_var_z: float
    target_r2: float
    target_mean: float
    cov_x: CovarianceSpec
    cov_delta: CovarianceSpec
    seed: int

    def __post_init__(self):
        _check_grid(self.grid_rows, self.grid_cols)
        if not self.target_var_z > 0:
            raise ConfigurationError(f"target_var_z must be > 0, got {self.target_var_z}")
        if not 0.0 <= self.target_r2 < 1.0:
            raise ConfigurationError(f"target_r2 must lie in [0, 1), got {self.target_r2}")
        if not math.isfinite(self.target_mean):
            raise ConfigurationError("target_mean must be finite")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

        expected_x = self.target_r2 * self.target_var_z
        expected_delta = (1.0 - self.target_r2) * self.target_var_z
        if not math.isclose(self.cov_x.sill, expected_x, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigurationError(
                f"cov_x.sill must equal target_r2 * target_var_z = {expected_x}, got {self.cov_x.sill}"
            )
        if not math.isclose(self.cov_delta.sill, expected_delta, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigurationError(
                f"cov_delta.sill must equal (1 - target_r2) * target_var_z = {expected_delta}, "
                f"got {self.cov_delta.sill}"
            )

    @classmethod
    def from_targets(
        cls,
        target_var_z: float,
        target_r2: float,
        seed: int,
        target_mean: float = DEFAULT_TARGET_MEAN,
        grid_rows: int = DEFAULT_GRID_ROWS,
        grid_cols: int = DEFAULT_GRID_COLS,
        range_x: float = DEFAULT_RANGE_X,
        range_delta: float = DEFAULT_RANGE_DELTA,
    ) -> "PopulationSpec":
        """Split the target variance into the X and Delta sills."""
        return cls(
            grid_rows=grid_rows,
            grid_cols=grid_cols,
            target_var_z=target_var_z,
            target_r2=target_r2,
            target_mean=target_mean,
            cov_x=CovarianceSpec(sill=target_r2 * target_var_z, range=range_x),
            cov_delta=CovarianceSpec(sill=(1.0 - target_r2) * target_var_z, range=range_delta),
            seed=int(seed),
        )

    @property
    def cells(self) -> int:
        return self.grid_rows * self.grid_cols

    def check_sample_size(self, n_max: int):
        """The grid must hold at least 50 cells per sampled cell (sampling fraction <= 2%)."""
        if self.cells < MIN_CELLS_PER_SAMPLE * n_max:
            raise GridTooSmallError(
                f"population of {self.cells} cells is too small for n={n_max}; "
                f"needs at least {MIN_CELLS_PER_SAMPLE * n_max} cells"
            )


@dataclass(frozen=True)
class Population:
    """
    Gridded synthetic reality. Arrays are flat (cell id = row * cols + col)
    and read-only; statistics are exact population values (divisor N).
    """
    spec: Optional[PopulationSpec]
    shape: tuple
    z: np.ndarray
    x: np.ndarray
    x_uncorr: np.ndarray
    delta: np.ndarray
    mu: float
    xbar_pop: float
    xbar_uncorr_pop: float
    var_z: float
    var_x: float
    var_delta: float
    r2_realized: float

    @property
    def size(self) -> int:
        return self.z.size

    def cell_coordinates(self, cell_indices) -> tuple:
        """(rows, cols) arrays for flat cell ids."""
        return np.divmod(np.asarray(cell_indices), self.shape[1])

    @classmethod
    def from_values(cls, z, x=None, x_uncorr=None, shape=None, spec=None, delta=None) -> "Population":
        """
        Wrap explicit per-cell arrays and record their exact statistics.

        Missing covariates default to zeros; delta defaults to the centered
        remainder z - x.
        """
        z = _frozen(z)
        x = _frozen(np.zeros_like(z) if x is None else x)
        x_uncorr = _frozen(np.zeros_like(z) if x_uncorr is None else x_uncorr)
        if not (z.size == x.size == x_uncorr.size):
            raise ArgumentError("z, x and x_uncorr must have the same number of cells")
        if z.size < 1:
            raise ArgumentError("a population needs at least one cell")
        if delta is None:
            remainder = z - x
            delta = remainder - _mean(remainder)
        delta = _frozen(delta)
        if shape is None:
            shape = (1, z.size)
        if shape[0] * shape[1] != z.size:
            raise ArgumentError(f"shape {shape} does not match {z.size} cells")

        var_z = _variance(z)
        var_x = _variance(x)
        if var_x > 0 and var_z > 0:
            r2_realized = _covariance(x, z) ** 2 / (var_x * var_z)
        else:
            r2_realized = 0.0

        return cls(
            spec=spec,
            shape=tuple(shape),
            z=z,
            x=x,
            x_uncorr=x_uncorr,
            delta=delta,
            mu=_mean(z),
            xbar_pop=_mean(x),
            xbar_uncorr_pop=_mean(x_uncorr),
            var_z=var_z,
            var_x=var_x,
            var_delta=_variance(delta),
            r2_realized=r2_realized,
        )


def _rescale(values: np.ndarray, target_var: float) -> np.ndarray:
    """Scale a centered array to an exact population variance."""
    if target_var == 0.0:
        return np.zeros_like(values)
    current = math.fsum(values * values) / values.size
    if current == 0.0:
        raise DegenerateInputError("cannot rescale a constant field to a positive variance")
    return values * math.sqrt(target_var / current)


def _calibrate(x_raw: np.ndarray, delta_raw: np.ndarray, spec: PopulationSpec) -> tuple:
    """Center both fields, orthogonalize Delta against X, rescale to the target sills."""
    x = x_raw - _mean(x_raw)
    delta = delta_raw - _mean(delta_raw)

    sxx = math.fsum(x * x)
    if sxx > 0.0:
        delta = delta - (math.fsum(delta * x) / sxx) * x
        delta = delta - _mean(delta)

    return _rescale(x, spec.cov_x.sill), _rescale(delta, spec.cov_delta.sill)


def decorrelate(x_raw, z) -> np.ndarray:
    """
    Remove the least-squares projection of x_raw onto z.

    The result has zero population correlation with z, and the mean and
    population variance of x_raw.

    Raises:
        DegenerateInputError: z is constant, or nothing of x_raw survives the projection
    """
    x_raw = np.asarray(x_raw, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if x_raw.shape != z.shape:
        raise ArgumentError(f"x_raw and z differ in length ({x_raw.size} vs {z.size})")
    if x_raw.size < 3:
        raise ArgumentError("decorrelation needs at least 3 cells")

    z_centered = z - _mean(z)
    szz = math.fsum(z_centered * z_centered)
    if szz == 0.0:
        raise DegenerateInputError("z is constant; correlation with it is undefined")

    target_mean = _mean(x_raw)
    target_var = _variance(x_raw)

    residual = x_raw - target_mean
    # second pass clears the rounding residue of the first
    for _ in range(2):
        residual = residual - (math.fsum(residual * z_centered) / szz) * z_centered
        residual = residual - _mean(residual)

    residual_var = math.fsum(residual * residual) / residual.size
    if residual_var == 0.0 or residual_var <= DEGENERATE_TOLERANCE * target_var:
        raise DegenerateInputError("x_raw is (almost) a linear function of z; nothing is left after decorrelation")

    return residual * math.sqrt(target_var / residual_var) + target_mean


def build_population(spec: PopulationSpec) -> Population:
    """
    Generate X and Delta from independent child seeds of spec.seed, calibrate
    them to the exact targets and add the decorrelated covariate.
    """
    rows, cols = spec.grid_rows, spec.grid_cols
    x_seed, delta_seed, uncorr_seed = np.random.SeedSequence(int(spec.seed)).spawn(3)

    x_raw = generate_field(spec.cov_x, rows, cols, x_seed).ravel()
    delta_raw = generate_field(spec.cov_delta, rows, cols, delta_seed).ravel()
    x, delta = _calibrate(x_raw, delta_raw, spec)
    z = x + delta + spec.target_mean

    uncorr_var = spec.cov_x.sill if spec.cov_x.sill > 0 else spec.target_var_z
    noise = np.random.default_rng(uncorr_seed).normal(0.0, math.sqrt(uncorr_var), size=z.size)
    x_uncorr = decorrelate(noise, z)

    population = Population.from_values(z, x, x_uncorr, shape=(rows, cols), spec=spec, delta=delta)
    logger.info(
        "Built population Var(Z)=%.1f r2=%.3f on %dx%d grid (mu=%.6f, r2 realized=%.6f)",
        spec.target_var_z, spec.target_r2, rows, cols, population.mu, population.r2_realized,
    )
    return population


# =============================================================================
# DIAGNOSTICS
# =============================================================================

def empirical_semivariogram(field, lag: float, tolerance: float = 0.5):
    """
    Classical semivariogram estimate at one lag distance.

    Uses every grid offset whose length lies within `tolerance` of `lag`
    (each unordered offset once) and pools all cell pairs.

    Returns:
        (gamma, distances, pair_counts): the estimate, the offset lengths used
        and the number of pairs each offset contributed
    """
    field = np.asarray(field, dtype=float)
    if field.ndim != 2:
        raise ArgumentError("field must be a 2-D grid")
    if lag <= 0 or tolerance <= 0:
        raise ArgumentError("lag and tolerance must be positive")

    rows, cols = field.shape
    reach = int(math.floor(lag + tolerance))
    squared_sum = 0.0
    distances = []
    pair_counts = []

    for di in range(0, min(reach, rows - 1) + 1):
        for dj in range(-min(reach, cols - 1), min(reach, cols - 1) + 1):
            if di == 0 and dj <= 0:
                continue
            distance = math.hypot(di, dj)
            if abs(distance - lag) > tolerance:
                continue
            if dj >= 0:
                ahead = field[di:, dj:]
                behind = field[:rows - di, :cols - dj]
            else:
                ahead = field[di:, :cols + dj]
                behind = field[:rows - di, -dj:]
            diff = ahead - behind
            squared_sum += float(np.sum(diff * diff))
            distances.append(distance)
            pair_counts.append(diff.size)

    if not pair_counts:
        raise ArgumentError(f"no grid offsets within {tolerance} of lag {lag}")

    pair_counts = np.array(pair_counts)
    gamma = squared_sum / (2.0 * pair_counts.sum())
    return gamma, np.array(distances), pair_counts


def dump_population(population: Population, path) -> Path:
    """Write the population fields as headered CSV for debugging."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cell_rows, cell_cols = population.cell_coordinates(np.arange(population.size))
    df = pd.DataFrame({
        "cell_row": cell_rows,
        "cell_col": cell_cols,
        "z": population.z,
        "x": population.x,
        "x_uncorr": population.x_uncorr,
    })
    df.to_csv(path, index=False, lineterminator="\n")
    logger.info("Dumped %d cells to %s", population.size, path)
    return path
