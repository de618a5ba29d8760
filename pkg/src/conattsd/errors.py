"""Exception hierarchy shared across the package."""


class ConAttSDError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ConAttSDError, ValueError):
    """Operand extents are incompatible."""


class ContractError(ConAttSDError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(ConAttSDError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(ConAttSDError, ValueError):
    """A model, training, or layer configuration is invalid."""


class DataError(ConAttSDError, ValueError):
    """Input data is malformed or disagrees with its declared header."""


class CheckpointError(ConAttSDError):
    """Base class for checkpoint decoding problems."""


class CheckpointFormatError(CheckpointError):
    """The file is not a checkpoint (bad magic header)."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint ended before all declared content was read."""


class CheckpointValidationError(CheckpointError):
    """Stored arrays disagree with the shapes implied by the stored config."""
