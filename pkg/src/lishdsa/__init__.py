"""Matrix-free hyper-differential sensitivity analysis on likelihood-informed
subspaces for regularized PDE-constrained inverse problems."""

__version__ = "0.1.0"

from . import hdsa, linops, lis, optim, problem, report, tracer, updates, verify
from .hdsa import (
    SensitivityReport,
    run_pipeline,
    sensitivity_indices,
    sensitivity_indices_direct,
    update_diagnostics,
)
from .lis import GevpBasis, GevpConfig, dense_gevp, randomized_gevp, truncate
from .optim import TrustRegionOptions, trust_region_solve
from .problem import InverseProblem, QuadraticModel, random_quadratic
from .tracer import TracerConfig, TracerData, TracerProblem, generate_data
from .updates import (
    UpdateSpec,
    default_alpha,
    first_order_update,
    is_second_order_satisfied,
    second_order_shift,
    update_norm,
)

__all__ = [
    "GevpBasis",
    "GevpConfig",
    "InverseProblem",
    "QuadraticModel",
    "SensitivityReport",
    "TracerConfig",
    "TracerData",
    "TracerProblem",
    "TrustRegionOptions",
    "UpdateSpec",
    "default_alpha",
    "dense_gevp",
    "first_order_update",
    "generate_data",
    "is_second_order_satisfied",
    "random_quadratic",
    "randomized_gevp",
    "run_pipeline",
    "second_order_shift",
    "sensitivity_indices",
    "sensitivity_indices_direct",
    "truncate",
    "trust_region_solve",
    "update_diagnostics",
    "update_norm",
    "__version__",
]
