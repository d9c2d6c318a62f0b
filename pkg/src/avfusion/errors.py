"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: validation and contract problems map
to 1, numerical failures to 2, I/O to 3.
"""


class AvFusionError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(AvFusionError):
    """Shapes or axes incompatible with the requested operation."""


class ContractError(AvFusionError):
    """An operation was called outside its documented contract."""


class MaskingError(AvFusionError):
    """An attention row has no permitted positions."""


class NumericsError(AvFusionError):
    """NaN appeared in a computation; the step must abort."""


class ConfigError(AvFusionError):
    """Invalid configuration value or unknown configuration key."""


class InputError(AvFusionError):
    """Malformed user-supplied data (records, labels, media)."""
