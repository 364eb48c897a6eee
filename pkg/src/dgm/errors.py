"""Exception types shared across the package."""


class DgmError(Exception):
    """Base class for all package errors."""


class DimensionError(DgmError, ValueError):
    """Shapes or extents do not agree."""


class CapacityError(DgmError):
    """A brute-force enumeration would exceed its configured guard."""


class NumericError(DgmError, ArithmeticError):
    """A computation produced a non-finite value or violated a checked bound."""


class FormatError(DgmError, ValueError):
    """An input file does not follow its declared binary format."""


class ConfigError(DgmError, ValueError):
    """A configuration value is missing, invalid or inconsistent."""
