"""
Exceptions for the model change detection app.

This module defines the exception hierarchy used across the numerical
kernel, the model families, the detectors and the management commands,
plus the handler that turns any of them into a command exit status.
"""

import logging

import numpy as np
from django.core.management.base import CommandError

logger = logging.getLogger(__name__)

EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


class ModelShiftError(Exception):
    """Base exception class for model change detection errors."""

    exit_code = EXIT_NUMERICAL_ERROR

    def __init__(self, message, exit_code=None):
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(self.message)


# -------------------
# Input / configuration errors (exit 2)
# -------------------
class InputError(ModelShiftError):
    """Raised when user-supplied data or configuration is unusable."""

    exit_code = EXIT_INPUT_ERROR


class DimensionMismatch(InputError):
    def __init__(self, expected, got, what="parameter vector"):
        self.expected = expected
        self.got = got
        super().__init__(f"Dimension mismatch for {what}: expected {expected}, got {got}.")


class DatasetFormatError(InputError):
    """Raised when a dataset CSV cannot be parsed."""

    def __init__(self, path, line, reason):
        self.path = path
        self.line = line
        message = f"{path}:{line}: {reason}" if line else f"{path}: {reason}"
        super().__init__(message)


class ConfigError(InputError):
    pass


class DomainError(InputError):
    """Raised when an argument lies outside its mathematical domain."""


class NonSymmetric(InputError):
    def __init__(self, deviation, tol):
        self.deviation = deviation
        super().__init__(
            f"Matrix is not symmetric: max |A - A^T| = {deviation:.3e} exceeds {tol:.0e}."
        )


class UnresolvedThreshold(InputError):
    def __init__(self):
        super().__init__("Detection threshold eta has not been resolved.")


class OutputError(InputError):
    pass


# -------------------
# Numerical / model errors (exit 3)
# -------------------
class NumericalError(ModelShiftError):
    """Raised when a numerical routine or model fit fails."""

    exit_code = EXIT_NUMERICAL_ERROR


class ConvergenceFailure(NumericalError):
    pass


class NegativeEigenvalue(NumericalError):
    def __init__(self, value):
        self.value = value
        super().__init__(f"Covariance has a negative eigenvalue {value:.3e}.")


class SingularMatrix(NumericalError):
    """Raised when an SPD solve meets an ill-conditioned matrix."""

    def __init__(self, condition, what="matrix"):
        self.condition = condition
        super().__init__(f"Singular {what}: condition number {condition:.3e}.")


class SingularDesign(SingularMatrix):
    def __init__(self, condition):
        super().__init__(condition, what="design (X^T X)")


class SingularFisher(SingularMatrix):
    def __init__(self, condition):
        super().__init__(condition, what="Fisher information estimate")


class SingularCovariance(SingularMatrix):
    def __init__(self, condition):
        super().__init__(condition, what="difference covariance")


class Separation(NumericalError):
    def __init__(self, reason):
        super().__init__(f"Logistic data appear linearly separable: {reason}.")


class NoConvergence(NumericalError):
    def __init__(self, iterations, grad_norm):
        self.iterations = iterations
        self.grad_norm = grad_norm
        super().__init__(
            f"No convergence after {iterations} iterations "
            f"(gradient inf-norm {grad_norm:.3e})."
        )


class RootBracketFailure(NumericalError):
    def __init__(self, doublings):
        super().__init__(
            f"No sign change of the secular equation after {doublings} doublings."
        )


class ModelFitFailure(NumericalError):
    """A simulated trial failed to fit; carries its Monte Carlo coordinates."""

    def __init__(self, trial, cause, grid_point=None):
        self.trial = trial
        self.grid_point = grid_point
        self.cause = cause
        where = f"trial {trial}" if grid_point is None else f"grid point {grid_point}, trial {trial}"
        super().__init__(f"Model fit failed at {where}: {type(cause).__name__}: {cause}")


def handle_command_exception(exc):
    """
    Convert an exception raised inside a management command into a
    CommandError carrying the exit code of the error class.

    Args:
        exc: The exception instance

    Returns:
        CommandError ready to be raised
    """
    if isinstance(exc, CommandError):
        return exc

    if isinstance(exc, ModelShiftError):
        logger.debug(f"{type(exc).__name__}: {exc.message}")
        return CommandError(f"{type(exc).__name__}: {exc.message}", returncode=exc.exit_code)

    # LinAlgError subclasses ValueError
    if isinstance(exc, np.linalg.LinAlgError):
        return CommandError(f"{type(exc).__name__}: {exc}", returncode=EXIT_NUMERICAL_ERROR)

    if isinstance(exc, (OSError, ValueError)):
        return CommandError(f"{type(exc).__name__}: {exc}", returncode=EXIT_INPUT_ERROR)

    logger.error(
        f"Unhandled exception: {exc.__class__.__name__}: {str(exc)}",
        exc_info=True,
    )
    return CommandError(
        f"Internal error: {exc.__class__.__name__}: {exc}", returncode=EXIT_NUMERICAL_ERROR
    )
