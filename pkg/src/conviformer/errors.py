"""Exception types raised across the package."""


class ConviformerError(Exception):
    """Base class for all package errors."""


class DimensionError(ConviformerError, ValueError):
    """Tensor or image extents are incompatible with an operation."""


class ContractError(ConviformerError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class DegenerateInputError(ConviformerError, ValueError):
    """Input is too small or empty for the requested transform."""


class LabelError(ConviformerError, ValueError):
    """Class ids are out of range or inconsistent with the label hierarchy."""


class SamplingError(ConviformerError, ValueError):
    """A batch cannot provide the samples a loss term needs."""


class ConfigError(ConviformerError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ConviformerError, ValueError):
    """A checkpoint or image file is malformed."""


class ConversionError(ConviformerError, ValueError):
    """A checkpoint does not match the naming schema expected by a conversion."""


class NonFiniteError(ConviformerError, FloatingPointError):
    """NaN or Inf appeared in a forward value, gradient or loss."""
