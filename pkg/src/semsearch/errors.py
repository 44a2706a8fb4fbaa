"""Shared exception types."""


class SemSearchError(Exception):
    """Base class for all library errors."""


class ShapeError(SemSearchError):
    """Operand shapes are incompatible."""


class NumericError(SemSearchError):
    """Non-finite or otherwise invalid numeric input."""


class ContractError(SemSearchError):
    """A documented precondition was violated by the caller."""


class InputError(SemSearchError):
    """User-supplied data (sequences, files, configs) is invalid."""


class NotFoundError(SemSearchError):
    """A requested key is absent from a store or index."""
