"""Exception hierarchy shared across the package."""


class ShgnetError(Exception):
    """Base class for every error raised by this package."""


class DataError(ShgnetError, ValueError):
    """Invalid input data: manifests, images, labels, shapes of user data."""


class DimensionError(ShgnetError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class NumericError(ShgnetError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(ShgnetError, ValueError):
    """A configuration object violates its invariants."""


class CheckpointError(ShgnetError):
    """Base class for checkpoint (de)serialization failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unparsable header."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before all declared payload bytes."""


class CheckpointShapeError(CheckpointError):
    """Declared shapes disagree with payload sizes or with the model."""
