"""Asymptotic-preserving DG discretization of a linear kinetic semiconductor model
in weighted form and its discrete drift-diffusion limit, in one space and one
velocity dimension."""
from .errors import (BoundaryTraceError, ConfigurationError, DomainError,
                     InvariantViolation, SolverError, UnsupportedError)
from .mesh import (DGSpace, Mesh1D, Quadrature, SpatialField, conforming_interpolant,
                   jump_average, l2_project, norm_dual, norm_Hh1,
                   projection_stability_ratio)
from .maxwellian import (DiscreteMaxwellian, GammaCoefficients, assumption_report,
                         build_root_maxwellian, discrete_temperature, discrete_velocity,
                         gamma_edges)
from .kinetic import (AssembledOperators, FieldPreset, KineticState, ProblemData, assemble,
                      energy_diagnostics, evolution_residuals, initial_state, make_phase_space,
                      moments, run, step)
from .drift_diffusion import (DDOperators, DDState, assemble_dd, initial_dd_state,
                              manufactured_reference, run_dd, step_dd)
from .studies import StudyConfig, StudyResult, emit_outputs, load_config, run_study

__version__ = "0.1.0"
