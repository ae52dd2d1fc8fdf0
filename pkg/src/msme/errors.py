"""Exception hierarchy shared by all modules."""


class MSMEError(Exception):
    """Base class for library errors."""


class DimensionError(MSMEError, ValueError):
    """Tensor extents or channel counts do not agree."""


class GeometryError(DimensionError):
    """Spatial size incompatible with a network or tiling geometry."""


class ContractError(MSMEError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(MSMEError, ArithmeticError):
    """Non-finite values encountered."""


class CorruptionError(MSMEError, IOError):
    """On-disk data does not match its manifest."""


class InfeasibilityError(ContractError):
    """A requested marker combination cannot be served by the training data."""


class DegenerateChannelError(ContractError):
    """A channel has zero variance and cannot be standardized."""


class ConfigError(MSMEError, ValueError):
    """Invalid or unknown configuration keys."""
