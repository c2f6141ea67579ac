"""Shared exception types.

The CLI maps these onto exit codes: InputError -> 2, the numerical
failures (SolvabilityViolation, ConvergenceError, NonIntegrableForcing,
DegenerateModelError) -> 3.  Check failures are not exceptions.
"""


class PhgError(Exception):
    """Base class for all package errors."""


class InputError(PhgError):
    """Malformed file, config, or argument."""


class SpectralMismatchError(PhgError):
    """Operands belong to different spectral models (or wrong length L)."""


class IndexMonoidError(PhgError):
    """An exponent fell outside the index monoid, or an index query failed."""


class DegenerateModelError(PhgError):
    """Indicial data too close to merge reliably at the working tolerance."""


class SolvabilityViolation(PhgError):
    """Shifted Poisson problem with a nonzero kernel component.

    Signals a missing log correction upstream of the solve.
    """

    def __init__(self, mode, value, tol):
        super().__init__(
            f"kernel mode {mode} carries component {value:.3e} "
            f"(tolerance {tol:.1e}); right-hand side is not solvable"
        )
        self.mode = mode
        self.value = value
        self.tol = tol


class NonIntegrableForcing(PhgError):
    """Mode forcing grows too fast near x=0 for the solution formula."""


class ConvergenceError(PhgError):
    """Iteration failed to converge (carries the final defect)."""

    def __init__(self, message, defect=None):
        super().__init__(message)
        self.defect = defect
