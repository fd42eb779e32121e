"""Branching Markov processes on finite configurations: solvers, simulation, checks."""

__version__ = "0.1.0"

from .base_process import BaseModel, apply_killed_semigroup, apply_semigroup, sample_path
from .config_space import (Configuration, DomainError, ScalarField, add_configurations,
                           eval_exponential, eval_linear, eval_multiplicative)
from .linear import moment_operator, solve_Q_feynman_kac, solve_Q_picard
from .mechanism import (Displacement, MechanismConstants, OffspringLaw,
                        apply_to_linear, apply_to_multiplicative, constants, sample_offspring)
from .nonlinear import cumulant_V, invariant_residual, picard_step, solve_H
from .particles import (estimate_functional, simulate_forest, surviving_particles,
                        verify_branching_property)
from .picard import NonConvergenceError, SemigroupTable, SolverMesh
from .stats import Estimate, InvalidEstimateError
from .streams import SeededStream
from .superprocess import (MeasureState, MechanismPhi, approx_superprocess_path,
                           compose_discrete_over_measure, solve_cumulant_N)
