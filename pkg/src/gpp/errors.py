"""Exception types shared across the package."""


class GppError(Exception):
    """Base class for all package errors."""


class ShapeError(GppError, ValueError):
    pass


class DomainError(GppError, ValueError):
    """An argument lies outside its valid range (labels, probabilities, rates)."""


class NumericError(GppError, ArithmeticError):
    """A non-finite value appeared in a loss, gradient or parameter."""


class ConfigError(GppError, ValueError):
    pass


class DataError(GppError):
    """A dataset is missing, unreadable or malformed."""


class ParseError(DataError, ValueError):
    """Malformed binary or text input. ``offset`` is a byte offset or row number."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolViolation(GppError):
    """An outbound federated message would carry raw features or sensitive labels."""


class CheckpointError(GppError):
    pass
