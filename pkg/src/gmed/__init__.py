"""Causal mediation analysis with a Gaussian covariance-graph mediator.

Identifies linear projections of multivariate mediator observations whose
log-variance mediates an exposure-outcome effect, by minimizing a plug-in
hierarchical likelihood with coordinate descent and a constrained
eigenproblem update, and quantifies uncertainty by unit-level bootstrap.
"""

__version__ = "0.1.0"

from .causal import (
    BootstrapResult,
    bootstrap,
    bootstrap_p_value,
    estimands,
    percentile_ci,
    refit_fixed,
)
from .components import ComponentSet, deflate, dfd, select_components
from .data import (
    CausalEstimates,
    ConstraintMatrix,
    Dataset,
    ModelParameters,
    ProjectionVector,
    SampleCovariance,
    UnitRecord,
    identity_constraint,
    load_dataset,
    pooled_covariance,
    sample_covariances,
    save_dataset,
)
from .likelihood import (
    LikelihoodContext,
    build_A_matrix,
    grad_hess_alpha,
    grad_hess_alpha0i,
    lagrangian_value,
    neg_hier_loglik,
    neg_hier_loglik_terms,
)
from .optimizer import (
    ComponentFit,
    FitTrace,
    OptimizerConfig,
    closed_form_update,
    fit_component,
    fit_fixed_theta,
    initialize,
    newton_block_update,
    solve_theta,
)
from .simulate import (
    GroundTruth,
    MethodConfig,
    ReplicationResult,
    SimulationDesign,
    generate_dataset,
    random_orthonormal,
    replication_study,
    similarity,
)

__all__ = [
    "BootstrapResult",
    "CausalEstimates",
    "ComponentFit",
    "ComponentSet",
    "ConstraintMatrix",
    "Dataset",
    "FitTrace",
    "GroundTruth",
    "LikelihoodContext",
    "MethodConfig",
    "ModelParameters",
    "OptimizerConfig",
    "ProjectionVector",
    "ReplicationResult",
    "SampleCovariance",
    "SimulationDesign",
    "UnitRecord",
    "bootstrap",
    "bootstrap_p_value",
    "build_A_matrix",
    "closed_form_update",
    "deflate",
    "dfd",
    "estimands",
    "fit_component",
    "fit_fixed_theta",
    "generate_dataset",
    "grad_hess_alpha",
    "grad_hess_alpha0i",
    "identity_constraint",
    "initialize",
    "lagrangian_value",
    "load_dataset",
    "neg_hier_loglik",
    "neg_hier_loglik_terms",
    "newton_block_update",
    "percentile_ci",
    "pooled_covariance",
    "random_orthonormal",
    "refit_fixed",
    "replication_study",
    "sample_covariances",
    "save_dataset",
    "select_components",
    "similarity",
    "solve_theta",
]
