"""
Simple random sampling of grid cells without replacement.
"""

from dataclasses import dataclass

import numpy as np

from errors import ArgumentError
from geofield import Population


@dataclass(frozen=True)
class Sample:
    """Cells drawn from a population and the field values measured there."""
    n: int
    cell_indices: np.ndarray
    z: np.ndarray
    x: np.ndarray
    x_uncorr: np.ndarray


def partial_fisher_yates(population_size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    First n positions of a Fisher-Yates shuffle of range(population_size).

    Only swapped positions are stored, so memory is O(n) however large the
    population is. Every n-subset (and every ordering of it) is equally likely.
    """
    if not 1 <= n <= population_size:
        raise ArgumentError(f"sample size must lie in [1, {population_size}], got {n}")

    # position i swaps with a uniform position in [i, N)
    targets = rng.integers(np.arange(n), population_size).tolist()
    swapped = {}
    chosen = []
    for i, j in enumerate(targets):
        chosen.append(swapped.get(j, j))
        swapped[j] = swapped.get(i, i)
    return np.array(chosen, dtype=np.int64)


def srs_sample(pop: Population, n: int, seed) -> Sample:
    """
    Draw n distinct cells uniformly at random.

    Args:
        pop: population to sample
        n: sample size, 1 <= n <= N
        seed: int, SeedSequence or Generator; same seed gives the same sample
    """
    if not 1 <= n <= pop.size:
        raise ArgumentError(f"sample size must lie in [1, {pop.size}], got {n}")

    rng = np.random.default_rng(seed)
    cells = partial_fisher_yates(pop.size, n, rng)
    return Sample(
        n=n,
        cell_indices=cells,
        z=pop.z[cells].copy(),
        x=pop.x[cells].copy(),
        x_uncorr=pop.x_uncorr[cells].copy(),
    )
