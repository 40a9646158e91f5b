"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 2,
data/format/I-O problems exit 3, verification failures exit 1.
"""


class VelofewError(Exception):
    """Base class for all package errors."""


class DimensionError(VelofewError):
    """Operand shapes are incompatible."""


class ContractError(VelofewError):
    """A documented precondition was violated by the caller."""


class ConfigError(VelofewError):
    """Invalid or inconsistent configuration."""


class DataError(VelofewError):
    """Input data is unusable (missing videos, non-finite values, ...)."""


class DegenerateInputError(DataError):
    """Numerically degenerate input, e.g. a zero-norm embedding row."""


class FormatError(VelofewError):
    """A binary file does not conform to its format.

    ``offset`` is the byte position at which the problem was detected,
    or None when no single position applies.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VerificationError(VelofewError):
    """An internal verification (oracle or gradient check) failed."""
