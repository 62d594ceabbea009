"""Wong–Zakai approximations and support studies for stochastic hydrodynamical models."""

from .coefficients import (AffineFamily, AffineOperator, ControlShift, PointwiseFamily, ScaledFamily,
                           check_coefficient_conditions, correction_rho, smooth_control)
from .experiments import (ConvergenceReport, ExperimentConfig, girsanov_shift_path, moment_diagnostics,
                          noise_tail_study, support_forward_study, support_reverse_study,
                          wz_convergence_study)
from .models import HydroModel, check_condition_B, dyadic, goy, linear, make_model, ns2d, sabra
from .noise import BrownianPath, DomainError, sample_brownian, sample_ensemble, tail_probability_bound
from .solvers import (DivergedError, IntegratorConfig, integrate_sde, integrate_wz,
                      solve_skeleton)
from .spaces import SpectralSpace, StructuralError, Trajectory, x_distance

__version__ = "0.1.0"
