"""Exception types shared across the package."""


class LinequantError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(LinequantError):
    """Shapes or extents do not satisfy an operation's contract."""


class ContractError(LinequantError):
    """An API precondition was violated (e.g. non-scalar loss)."""


class LabelError(LinequantError):
    """A class id or character is outside the known label set."""


class DegenerateWeightsError(LinequantError):
    """Position weights are all zero or otherwise unusable."""


class RenderingError(LinequantError):
    """A text line could not be rasterized."""


class ConfigurationError(LinequantError):
    """An invalid or inconsistent configuration value."""


class DataError(LinequantError):
    """Corpus or label data violates an expected property."""


class InsufficientDataError(DataError):
    """Not enough data points to carry out the requested fit."""


class EmptySequenceError(DataError):
    """An input that must yield at least one element yields none."""


class PlanError(LinequantError):
    """A mask plan does not match the image it is applied to."""


class FormatError(LinequantError):
    """A binary artifact is corrupt, truncated, or mislabeled."""


class VersionError(FormatError):
    """A binary artifact has an unsupported format version."""


class MissingArtifactError(LinequantError):
    """A required upstream artifact does not exist."""


class EmptyInputError(LinequantError):
    """An input file contains no usable records."""
