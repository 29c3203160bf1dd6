"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class DegeneratePoseError(ContractViolation):
    """Camera position lies strictly inside an obstacle primitive."""


class GenerationError(RuntimeError):
    """Procedural scene generation exceeded its rejection-sampling budget."""


class ConfigError(ValueError):
    """Configuration file failed schema validation."""


class CheckpointError(IOError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or malformed header."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class TrainingAborted(RuntimeError):
    """Raised after too many consecutive non-finite iterations."""
