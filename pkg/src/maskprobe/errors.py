"""Exception hierarchy shared by every maskprobe module."""


class MaskProbeError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(MaskProbeError, ValueError):
    """A documented precondition of a public operation was not met."""


class NonFiniteError(MaskProbeError, FloatingPointError):
    """A numeric routine produced NaN or Inf where a finite value was required."""


class CheckpointError(MaskProbeError):
    """Base class for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """File does not start with the checkpoint magic bytes or is malformed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ended before all declared arrays were read."""


class CheckpointShapeError(CheckpointError):
    """Stored weight shapes disagree with the stored architecture."""


class IdxError(MaskProbeError):
    """Base class for IDX dataset ingestion failures."""


class IdxMagicError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class ConfigError(MaskProbeError):
    """Invalid experiment configuration (maps to CLI exit status 1)."""
