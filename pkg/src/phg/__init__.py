"""Polyhomogeneous cusp expansions near a divisor.

Computes, term by term, the log-power asymptotic expansion of the
finite-volume cusp solution of a model complex Monge-Ampere problem, and
cross-validates every coefficient against an independent per-eigenmode ODE
oracle.  See README.md for the pipeline and file formats.
"""

__version__ = "0.1.0"

from .errors import (ConvergenceError, DegenerateModelError, IndexMonoidError,
                     InputError, NonIntegrableForcing, PhgError,
                     SolvabilityViolation, SpectralMismatchError)
from .indices import (COINCIDENCE_TOL, IndexSet, IndicialRoots, build_index_set,
                      characteristic_roots)
from .series import (AnalyticGerm, LogMonomial, PhgSeries, compose_analytic,
                     integrate_monomial)
from .spectral import SpectralModel, builtin_model, circle_model, \
    model_from_json_dict, point_model, torus_model
from .formal import (FormalSolution, FreeComponent, ModelProblem,
                     first_log_coefficient, formal_expansion, make_source,
                     residual, step_correction)

__all__ = [
    "AnalyticGerm", "COINCIDENCE_TOL", "ConvergenceError", "DegenerateModelError",
    "FormalSolution", "FreeComponent", "IndexMonoidError", "IndexSet",
    "IndicialRoots", "InputError", "LogMonomial", "ModelProblem",
    "NonIntegrableForcing", "PhgError", "PhgSeries", "SolvabilityViolation",
    "SpectralMismatchError", "SpectralModel", "build_index_set", "builtin_model",
    "characteristic_roots", "circle_model", "compose_analytic",
    "first_log_coefficient", "formal_expansion", "integrate_monomial",
    "make_source", "model_from_json_dict", "point_model", "residual",
    "step_correction", "torus_model",
]
