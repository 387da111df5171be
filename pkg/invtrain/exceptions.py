"""Exceptions for invtrain, and the API handlers that render them."""

from fastapi.responses import JSONResponse


class InvTrainError(Exception):
    """Base class for every error raised by invtrain."""


# Tensor engine


class ZeroVectorError(InvTrainError):
    """A vector too close to zero to be normalized."""


class NotScalarError(InvTrainError):
    """backward() was called on a tensor with more than one element."""


class TapeConsumedError(InvTrainError):
    """The tape was already replayed and has not been reset."""


class ShapeMismatchError(InvTrainError):
    """Operand shapes are incompatible."""


# Causal models


class InvalidDagError(InvTrainError):
    """The graph is cyclic or a conditional probability table is malformed."""


class UnknownNodeError(InvTrainError):
    """A query names a node that is not in the graph."""


class InvalidStateError(InvTrainError):
    """A state index lies outside the variable's cardinality."""


class InvalidQueryError(InvTrainError):
    """A query violates its preconditions (e.g. x == y)."""


class CriterionViolatedError(InvTrainError):
    """The adjustment set does not satisfy the backdoor criterion."""


class PositivityError(InvTrainError):
    """An adjustment stratum has zero probability for the treatment value."""


# Losses


class EmptyClassError(InvTrainError):
    """A class has no features to build its proxy from."""


class EmptyInputError(InvTrainError):
    """An environment partition was requested for no scores."""


class EmptyAnchorError(InvTrainError):
    """The anchor class has no features in the batch."""


class EmptyEnvironmentError(InvTrainError):
    """A noise environment holds no features."""


class UninitializedError(InvTrainError):
    """Proxies are used before they were initialized."""


class LabelOutOfRangeError(InvTrainError):
    """A label is not smaller than the number of classes."""


# I/O and training


class DatasetIOError(InvTrainError):
    """A dataset could not be written, read or verified."""


class CheckpointError(InvTrainError):
    """A checkpoint could not be read or does not match the network."""


class DivergenceError(InvTrainError):
    """The training loss became non-finite."""


# Error handlers


def json_error_response(message: str, status_code: int) -> JSONResponse:
    """Create a JSON error response."""
    return JSONResponse(content={"error": message}, status_code=status_code)


async def general_exception_handler(request, exc) -> JSONResponse:  # pylint: disable=unused-argument
    """
    General exception handler for unhandled exceptions.
    """

    # Throw a generic error message
    error_str = "An unexpected error occurred. Please try again later."
    return json_error_response(error_str, 500)


async def http_exception_handler(request, exc) -> JSONResponse:  # pylint: disable=unused-argument
    """StarletteHTTPException handler"""

    error_str = str(exc.detail).replace("\n", " ").strip()
    return json_error_response(error_str, exc.status_code)


async def validation_exception_handler(request, exc) -> JSONResponse:  # pylint: disable=unused-argument
    """Exception handler for request validation errors."""

    errors = exc.errors()
    error_str = ", ".join(
        [f"Error in {'.'.join(str(part) for part in e['loc'])}: {e['msg']}" for e in errors]
    )
    return json_error_response(error_str, 400)


async def invtrain_exception_handler(request, exc) -> JSONResponse:  # pylint: disable=unused-argument
    """Domain errors are client errors: the submitted graph or image was unusable."""

    return json_error_response(f"{type(exc).__name__}: {exc}", 422)
