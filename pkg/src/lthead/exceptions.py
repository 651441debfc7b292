"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class DomainError(ValueError):
    """A scalar argument lies outside its supported domain."""


class DataError(ValueError):
    """Labels, counts, or array contents violate a data contract."""


class FormatError(DataError):
    """A file does not conform to its binary or text layout."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class StateError(RuntimeError):
    """An operation received a stale or mismatched cache."""


class EvaluationError(ArithmeticError):
    """A function under numerical test produced a non-finite value."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
