"""Exception hierarchy shared by every module."""


class MemsnnError(Exception):
    """Base class for all package errors."""


class ConfigError(MemsnnError, ValueError):
    """Invalid parameter values or malformed config files."""


class DomainError(MemsnnError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class ShapeError(MemsnnError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(MemsnnError, ArithmeticError):
    """A NaN or Inf appeared in a state, activation or gradient."""


class SingularDivision(MemsnnError, ZeroDivisionError):
    """A recorded division had a denominator too close to zero."""


class DataError(MemsnnError):
    """Dataset files could not be parsed."""


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class MissingLabel(DataError):
    pass


class BadLabel(DataError):
    pass
