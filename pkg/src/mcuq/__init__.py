"""De-biased low-rank matrix completion with entrywise confidence intervals."""

__version__ = "0.1.0"

from .covmax import AllocationProblem, IntervalAllocation, allocate, expected_coverage, realized_coverage
from .estimator import DebiasedEstimate, FitConfig, MaskedObservations, fit
from .matgrid import SvdTriple, truncated_svd
from .synthgen import SimConfig, gen_instance, run_coverage_experiment, run_distribution_check
from .uq import (
    VarianceField,
    binary_variance,
    empirical_plugin_variance,
    gaussian_homogeneous_variance,
    intervals,
    oracle_variance,
    poisson_variance,
    residual_variance_field,
)

__all__ = [
    "AllocationProblem",
    "DebiasedEstimate",
    "FitConfig",
    "IntervalAllocation",
    "MaskedObservations",
    "SimConfig",
    "SvdTriple",
    "VarianceField",
    "allocate",
    "binary_variance",
    "empirical_plugin_variance",
    "expected_coverage",
    "fit",
    "gaussian_homogeneous_variance",
    "gen_instance",
    "intervals",
    "oracle_variance",
    "poisson_variance",
    "realized_coverage",
    "residual_variance_field",
    "run_coverage_experiment",
    "run_distribution_check",
    "truncated_svd",
]
