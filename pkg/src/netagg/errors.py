"""Exception hierarchy shared by all netagg modules."""


class NetAggError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NetAggError):
    """Tensor shapes or parameter keys are incompatible."""


class ConfigError(NetAggError):
    """Invalid configuration value or option combination."""


class DataError(NetAggError):
    """Dataset contents violate a precondition (labels, sizes, classes)."""


class FormatError(NetAggError):
    """A binary file does not conform to its expected on-disk format."""


class NumericsError(NetAggError):
    """A computation produced NaN/Inf where finite values are required."""
