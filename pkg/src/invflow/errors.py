"""Exception types raised across the package."""


class InvFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(InvFlowError, ValueError):
    """Shapes or lengths do not agree."""


class CapacityError(InvFlowError, ValueError):
    """A dense materialization would exceed the size guard."""


class SingularityError(InvFlowError, ValueError):
    """A matrix that must be invertible is (numerically) singular."""


class StateError(InvFlowError, RuntimeError):
    """A layer was used before it was initialized."""


class ArgumentError(InvFlowError, ValueError):
    """An argument is outside its allowed range."""


class FormatError(InvFlowError, ValueError):
    """A file could not be parsed.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(InvFlowError, FloatingPointError):
    """A layer produced NaN or Inf values."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
