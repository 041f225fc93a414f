"""
Build one synthetic population and check it against its targets.

Prints the exact population statistics, the calibration invariants and the
empirical semivariogram of Z at a few lags next to the spherical model.

Usage:
    python check_population.py --variance 2100 --r2 0.3
    python check_population.py --variance 900 --dump output/population_900.csv
"""

import argparse
import sys

import numpy as np

from config import (
    DEFAULT_GRID_COLS,
    DEFAULT_GRID_ROWS,
    DEFAULT_MASTER_SEED,
    DEFAULT_RANGE_DELTA,
    DEFAULT_RANGE_X,
    DEFAULT_TARGET_MEAN,
    env_master_seed,
)
from errors import LabError
from geofield import (
    PopulationSpec,
    build_population,
    dump_population,
    empirical_semivariogram,
    spherical_semivariogram,
)
from montecarlo import population_seed

CHECK_LAGS = (1.0, 3.0, 8.0, 15.0, 40.0)


def check_population(spec: PopulationSpec, lags=CHECK_LAGS) -> tuple:
    """
    Print diagnostics for a freshly built population.

    Returns:
        (ok, population) where ok means every exact target is hit to 1e-10
    """
    pop = build_population(spec)
    z = pop.z

    print(f"\n📂 Population Var(Z)={spec.target_var_z:g}, r2={spec.target_r2:g}, "
          f"{spec.grid_rows}x{spec.grid_cols} cells, seed {spec.seed}")
    print(f"   mu:              {pop.mu:.12f} (target {spec.target_mean:g})")
    print(f"   Var(Z):          {pop.var_z:.10f}")
    print(f"   Var(X):          {pop.var_x:.10f}")
    print(f"   Var(Delta):      {pop.var_delta:.10f}")
    print(f"   r2 realized:     {pop.r2_realized:.12f}")
    uncorr = np.corrcoef(pop.x_uncorr, z)[0, 1]
    print(f"   corr(X_uncorr, Z): {uncorr:.3e}")

    checks = {
        "mean": abs(pop.mu - spec.target_mean) <= 1e-10 * max(1.0, abs(spec.target_mean)),
        "variance": abs(pop.var_z - spec.target_var_z) <= 1e-10 * spec.target_var_z,
        "r2": abs(pop.r2_realized - spec.target_r2) <= 1e-10,
        "uncorrelated covariate": abs(uncorr) <= 1e-10,
    }
    print("\n   Invariants:")
    for name, ok in checks.items():
        print(f"      {'✅' if ok else '❌'} {name}")

    print("\n   Semivariogram of Z (empirical vs model):")
    field = z.reshape(pop.shape)
    for lag in lags:
        gamma, _, _ = empirical_semivariogram(field, lag)
        model = spherical_semivariogram(lag, spec.cov_x) + spherical_semivariogram(lag, spec.cov_delta)
        print(f"      lag {lag:5.1f}: {gamma:10.3f}  model {model:10.3f}")

    return all(checks.values()), pop


def main(argv=None):
    parser = argparse.ArgumentParser(description="Build and check one synthetic SOC population")
    parser.add_argument("--variance", type=float, default=2100.0, help="Target Var(Z) (default: 2100)")
    parser.add_argument("--r2", type=float, default=0.3, help="Target r2 of X (default: 0.3)")
    parser.add_argument("--seed", type=int, help="Master seed (default: MRV_LAB_SEED, then 1729)")
    parser.add_argument("--grid-rows", type=int, default=DEFAULT_GRID_ROWS)
    parser.add_argument("--grid-cols", type=int, default=DEFAULT_GRID_COLS)
    parser.add_argument("--range-x", type=float, default=DEFAULT_RANGE_X)
    parser.add_argument("--range-delta", type=float, default=DEFAULT_RANGE_DELTA)
    parser.add_argument("--dump", type=str, help="Write the population fields to this CSV file")
    args = parser.parse_args(argv)

    try:
        master_seed = args.seed if args.seed is not None else env_master_seed()
        if master_seed is None:
            master_seed = DEFAULT_MASTER_SEED
        spec = PopulationSpec.from_targets(
            target_var_z=args.variance,
            target_r2=args.r2,
            seed=population_seed(master_seed, args.variance),
            target_mean=DEFAULT_TARGET_MEAN,
            grid_rows=args.grid_rows,
            grid_cols=args.grid_cols,
            range_x=args.range_x,
            range_delta=args.range_delta,
        )
        ok, pop = check_population(spec)
        if args.dump:
            path = dump_population(pop, args.dump)
            print(f"\n💾 Saved {pop.size} cells to {path}")
    except LabError as exc:
        print(f"❌ {exc}")
        sys.exit(1)

    if not ok:
        print("\n⚠️  Population misses at least one target")
        sys.exit(1)
    print("\n✅ Population matches all targets")


if __name__ == "__main__":
    main()
