"""Exception types shared across the package."""


class VQLCMDError(Exception):
    """Base class for all library errors."""


class ContractError(VQLCMDError, ValueError):
    """A documented precondition was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class OrderingError(ContractError):
    """Times were passed in the wrong order (expected s <= t)."""


class TokenIndexError(VQLCMDError, IndexError):
    """A token id lies outside the valid range."""


class NumericError(VQLCMDError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointError(VQLCMDError):
    """Base class for checkpoint decoding failures."""


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class FormatError(VQLCMDError, ValueError):
    """A text file (config, samples, report) could not be parsed."""
