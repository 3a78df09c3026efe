"""Surrogate-based identification of elastic parameters in a contact problem.

A P1 finite element solver for dynamic linear elasticity with Nitsche
contact produces observation data; a dense softplus network learns the
parameter-to-observation map; gradient and BFGS estimators invert it.
"""

__version__ = "0.1.0"

from .errors import (
    ElastidError,
    LineSearchError,
    NonConvergenceError,
    NumericError,
    OutOfDomainError,
    SchemaError,
    TrainingError,
    ValidationError,
)
from .mesh import BoundaryTag, DomainSpec, Mesh, build_mesh, load_mesh, save_mesh
from .fem import FEConfig, FEState, ForwardSolution, LameParams, ParameterBox, ParameterPoint, solve_forward
from .observation import ObservationConfig, observe
from .network import DenseNetwork, NormalizationStats, TrainingConfig, init_network, load_network, save_network
from .gradient import backprop_to_input, misfit_value
from .estimator import EstimatorConfig, ObjectiveConfig, bfgs, gradient_descent
