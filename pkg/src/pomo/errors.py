"""Exception hierarchy. CLI exit codes map onto these classes."""


class PomoError(Exception):
    exit_code = 1


class ConfigError(PomoError, ValueError):
    exit_code = 2


class DatasetFormatError(PomoError, ValueError):
    """Raised for corrupt or mismatched dataset files.

    ``offset`` is the byte (binary) or line (JSON-lines) position where
    parsing failed, when known.
    """

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractViolation(PomoError, ValueError):
    """An argument broke an operation's precondition (illegal action, bad route...)."""

    exit_code = 3


class UnsupportedProblemError(PomoError, ValueError):
    exit_code = 3


class NumericError(PomoError, ArithmeticError):
    exit_code = 4


class SizeLimitError(PomoError, ValueError):
    exit_code = 3


class DatasetSchemaError(DatasetFormatError):
    """A well-formed file holding the wrong problem kind or fields."""
