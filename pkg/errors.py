"""
Exception hierarchy for the MRV simulation lab.

Every error raised on purpose by the lab derives from LabError, so scripts
can separate "the run was misconfigured" from "something broke".
"""


class LabError(Exception):
    """Base class for all lab errors."""


class ArgumentError(LabError, ValueError):
    """An operation was called with an out-of-range argument."""


class ConfigurationError(LabError, ValueError):
    """A population, field or run specification is invalid."""


class GridTooSmallError(ConfigurationError):
    """The grid cannot host the requested field or sample sizes."""


class DegenerateInputError(LabError, ValueError):
    """Input data has no variation where the computation needs some."""


class DegenerateCovariateError(DegenerateInputError):
    """The covariate is constant over the sample (zero OLS denominator)."""


class InsufficientSampleError(LabError, ValueError):
    """Too few sample values for the requested estimate."""


class InsufficientReplicatesError(InsufficientSampleError):
    """Too few Monte Carlo replicates for the requested metric."""


class EstimatorConsistencyError(LabError, ArithmeticError):
    """The two algebraic forms of the regression estimator disagree."""


class UsageError(LabError):
    """Bad command-line flags or config file content (exit code 2)."""


class ScenarioError(LabError):
    """A Monte Carlo scenario failed; carries the scenario id."""

    def __init__(self, scenario_id: str, cause: Exception):
        self.scenario_id = scenario_id
        self.cause = cause
        super().__init__(f"scenario {scenario_id} failed: {cause}")

    def __reduce__(self):
        # failures travel back from worker processes
        return type(self), (self.scenario_id, self.cause)
