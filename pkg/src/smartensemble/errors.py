"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated (bad k, non-scalar loss, ...)."""


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """An experiment configuration failed validation.

    ``pointer`` is the JSON pointer of the offending field, when known.
    """

    def __init__(self, message, pointer=None):
        if pointer is not None:
            message = f"{pointer}: {message}"
        super().__init__(message)
        self.pointer = pointer


class TrainingAbort(RuntimeError):
    """Training produced a non-finite value and was stopped."""
