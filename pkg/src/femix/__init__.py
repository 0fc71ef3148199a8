"""Free-energy mixing reads over causal selection priors, with numpy reference kernels."""
from .errors import AbsoluteContinuityError, ConstantValues, EmptySupport, FemError
from .fem_read import (
    FemGates,
    FemReadout,
    backward_two_gate,
    budget_dual_solve,
    free_energy,
    hidden_temperature,
    hull_membership_2pt,
    ltl_read,
    mean_read,
    min_truncation_degree,
    posterior,
    two_gate_read,
)
from .priors import PriorMatrix

__version__ = "0.1.0"

__all__ = [
    "AbsoluteContinuityError",
    "ConstantValues",
    "EmptySupport",
    "FemError",
    "FemGates",
    "FemReadout",
    "PriorMatrix",
    "backward_two_gate",
    "budget_dual_solve",
    "free_energy",
    "hidden_temperature",
    "hull_membership_2pt",
    "ltl_read",
    "mean_read",
    "min_truncation_degree",
    "posterior",
    "two_gate_read",
]
