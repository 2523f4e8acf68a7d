"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or layer shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class DataFormatError(ValueError):
    """An input file does not match its expected binary/text format."""


class ConfigError(ValueError):
    """A configuration value violates an invariant; message names the key."""
