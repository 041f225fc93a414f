"""Shared fixtures: small calibrated populations and a toy population for exact enumeration."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repository root to the path
sys.path.insert(0, str(Path(__file__).parent.parent))

from geofield import Population, PopulationSpec, build_population  # noqa: E402

SMALL_GRID = 96


@pytest.fixture(scope="session")
def small_spec():
    return PopulationSpec.from_targets(900.0, 0.3, seed=7, grid_rows=SMALL_GRID, grid_cols=SMALL_GRID)


@pytest.fixture(scope="session")
def small_population(small_spec):
    """96x96 population, Var(Z)=900, r2=0.3 (circulant-embedding path)."""
    return build_population(small_spec)


@pytest.fixture
def toy_population():
    """12 cells with x = 1..12 and z = x^2."""
    x = np.arange(1.0, 13.0)
    return Population.from_values(z=x ** 2, x=x, x_uncorr=np.zeros(12))
