class DSCLError(Exception):
    """Base class for package errors."""


class ShapeError(DSCLError, ValueError):
    pass


class DegenerateInputError(DSCLError, ValueError):
    """Raised when a map or tensor has no usable variation or norm."""


class ConfigError(DSCLError, ValueError):
    pass


class FormatError(DSCLError, ValueError):
    """Malformed file contents."""


class NumericalError(DSCLError, ArithmeticError):
    pass
