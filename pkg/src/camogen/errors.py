"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (config 2, input/dimension 3, numeric 4),
so library code should raise the most specific class that applies.
"""


class CamogenError(Exception):
    """Base class for all package errors."""


class ConfigError(CamogenError):
    """Invalid configuration: bad key, bad value, inconsistent settings."""


class DimensionError(CamogenError):
    """Array shapes incompatible with the requested operation."""


class InputError(CamogenError):
    """Invalid runtime input: empty mask, missing file, malformed dataset."""


class NumericError(CamogenError):
    """Non-finite values or numerically invalid state."""


class InvariantError(CamogenError):
    """Internal contract broken (e.g. optimizer step with missing gradients)."""
