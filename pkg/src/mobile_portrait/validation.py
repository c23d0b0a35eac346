"""Structured errors and contract checks for engine operations.

Every error carries a user-facing message, optional suggestions, and the
process exit code the CLI reports for it.
"""

from collections.abc import Sequence
from typing import Any

import numpy as np


class EngineError(Exception):
    """Base engine error with a user-friendly message and suggestions."""

    exit_code = 1
    error_type = "engine"

    def __init__(self, message: str, suggestions: list[str] | None = None):
        self.message = message
        self.suggestions = suggestions or []
        super().__init__(message)


class InputFormatError(EngineError):
    """A file or record does not follow its declared format."""

    exit_code = 2
    error_type = "input_format"

    def __init__(
        self,
        message: str,
        line: int | None = None,
        suggestions: list[str] | None = None,
    ):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, suggestions)


class ContractError(EngineError):
    """An operation precondition or shape contract was violated."""

    exit_code = 3
    error_type = "contract"


class DimensionError(ContractError):
    """Tensor extents disagree along a named axis."""

    def __init__(
        self,
        message: str,
        axis: str,
        expected: Any = None,
        actual: Any = None,
    ):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        detail = f"{message} (axis '{axis}'"
        if expected is not None:
            detail += f": expected {expected}, got {actual}"
        super().__init__(detail + ")")


class MissingWeightError(ContractError):
    """A weight container lacks tensors an operation needs."""

    def __init__(self, missing: Sequence[str], component: str):
        self.missing = list(missing)
        self.component = component
        shown = ", ".join(self.missing[:5])
        if len(self.missing) > 5:
            shown += f", ... and {len(self.missing) - 5} more"
        super().__init__(
            f"Weights for '{component}' are missing {len(self.missing)} tensor(s): {shown}",
            suggestions=[
                "Check that the weight file was written for the same preset",
                "Use `mobile-portrait weights inspect PATH` to list stored tensors",
            ],
        )


class NumericalError(EngineError):
    """A computation produced NaN/Inf or an ill-conditioned system."""

    exit_code = 4
    error_type = "numerical"

    def __init__(
        self,
        message: str,
        term: str | None = None,
        suggestions: list[str] | None = None,
    ):
        self.term = term
        super().__init__(message, suggestions)


class SingularSystemError(NumericalError):
    """A linear system is singular or too ill-conditioned to solve."""

    def __init__(self, message: str, condition: float):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


# ============ Contract Checks ============


def check_rank(shape: Sequence[int], rank: int, what: str) -> None:
    """Raise DimensionError unless ``shape`` has exactly ``rank`` axes."""
    if len(shape) != rank:
        raise DimensionError(f"{what} must be rank {rank}", axis="rank", expected=rank, actual=len(shape))


def check_axis(actual: int, expected: int, axis: str, what: str) -> None:
    """Raise DimensionError when one extent differs from its expected value."""
    if actual != expected:
        raise DimensionError(f"{what} has the wrong extent", axis=axis, expected=expected, actual=actual)


def check_same_shape(a: Sequence[int], b: Sequence[int], what: str) -> None:
    """Raise DimensionError naming the first axis where two shapes disagree."""
    a, b = tuple(a), tuple(b)
    if len(a) != len(b):
        raise DimensionError(f"{what}: rank mismatch", axis="rank", expected=len(a), actual=len(b))
    names = ("batch", "channels", "height", "width") if len(a) == 4 else tuple(str(i) for i in range(len(a)))
    for name, x, y in zip(names, a, b, strict=True):
        if x != y:
            raise DimensionError(f"{what}: shapes {a} and {b} differ", axis=name, expected=x, actual=y)


def check_range(values: np.ndarray, low: float, high: float, what: str) -> None:
    """Raise ContractError when any value lies outside ``[low, high]``."""
    if values.size and (float(values.min()) < low or float(values.max()) > high):
        raise ContractError(
            f"{what} must lie in [{low}, {high}], found [{float(values.min()):.4g}, {float(values.max()):.4g}]"
        )


def check_finite(values: np.ndarray, what: str, term: str | None = None) -> None:
    """Raise NumericalError when ``values`` holds NaN or Inf."""
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} contains NaN or Inf", term=term)


def format_error_response(
    error: Exception, context: str = "Operation failed"
) -> dict[str, Any]:
    """Format an error into a standardized response.

    Args:
        error: The exception that occurred.
        context: Context about what operation failed.

    Returns:
        Dictionary with error information.
    """
    if isinstance(error, EngineError):
        return {
            "success": False,
            "error": error.message,
            "suggestions": error.suggestions,
            "error_type": error.error_type,
        }

    # Generic error
    return {
        "success": False,
        "error": f"{context}: {error}",
        "error_type": "unknown",
    }
