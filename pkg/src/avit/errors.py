"""Exception types shared across the package."""


class AvitError(Exception):
    """Base class for all package errors."""


class DimensionError(AvitError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class ConfigError(AvitError, ValueError):
    """A model or run configuration violates its invariants."""


class ContractError(AvitError, RuntimeError):
    """An API precondition was violated by the caller."""


class InputError(AvitError, ValueError):
    """User-supplied data (dataset, arguments) is unusable."""


class ParseError(AvitError, ValueError):
    """A file could not be decoded.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointFormatError(ParseError):
    """Checkpoint file has a bad magic, unsupported version, or is truncated."""
