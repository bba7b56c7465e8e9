"""Higher-order Laplace approximations for high-dimensional integrals.

The log-integral ``log int exp(-g(u)) du`` is approximated by the
first-order Laplace formula plus series corrections built from connected
bipartitions of derivative-array indices.  The package covers the
combinatorics, the array contractions, GLMM objectives, quadrature
reference values and an experiment harness.
"""

from .bipartition import (
    Bipartition,
    BipartitionClass,
    canonical_signature,
    enumerate_connected,
    enumerate_connected_level,
    is_connected,
)
from .glmm import (
    GlmmModel,
    Hierarchy,
    MultilevelModel,
    build_g,
    check_condition2,
    original_model,
    reparameterize_multilevel,
    simulate_multilevel,
    simulate_two_level,
    structured_inverse,
    two_level_model,
)
from .laplace_engine import (
    ExpLinearG,
    GFunction,
    LaplaceExpansion,
    QuadraticG,
    ReparameterizedG,
    check_reparameterization_invariance,
    laplace_order1,
    laplace_order_k,
    level_contribution,
    minimize,
)
from .oracle import (
    OracleInfeasible,
    QuadratureSpec,
    exact_log_integral_tensor,
    exact_loglik_tensor,
    exact_loglik_two_level,
    log_integral_1d,
)
from .tensor_core import DerivArray, contract_bipartition, normalize_derivs, ostar_norm

__version__ = "0.1.0"

__all__ = [
    "Bipartition",
    "BipartitionClass",
    "canonical_signature",
    "enumerate_connected",
    "enumerate_connected_level",
    "is_connected",
    "GlmmModel",
    "Hierarchy",
    "MultilevelModel",
    "build_g",
    "check_condition2",
    "original_model",
    "reparameterize_multilevel",
    "simulate_multilevel",
    "simulate_two_level",
    "structured_inverse",
    "two_level_model",
    "ExpLinearG",
    "GFunction",
    "LaplaceExpansion",
    "QuadraticG",
    "ReparameterizedG",
    "check_reparameterization_invariance",
    "laplace_order1",
    "laplace_order_k",
    "level_contribution",
    "minimize",
    "OracleInfeasible",
    "QuadratureSpec",
    "exact_log_integral_tensor",
    "exact_loglik_tensor",
    "exact_loglik_two_level",
    "log_integral_1d",
    "DerivArray",
    "contract_bipartition",
    "normalize_derivs",
    "ostar_norm",
]
