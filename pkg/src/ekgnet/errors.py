"""Exception hierarchy shared by every ekgnet module."""


class EKGError(Exception):
    """Base class for all library errors."""


class ShapeError(EKGError, ValueError):
    pass


class NumericDomainError(EKGError, ValueError):
    """Raised when a NaN/Inf enters or leaves an operation."""


class ParameterError(EKGError, ValueError):
    pass


class EmptyInputError(EKGError, ValueError):
    pass


class TapeError(EKGError, RuntimeError):
    """Backward requested on a tensor that is not on the active tape."""


class StateError(EKGError, RuntimeError):
    pass


class ConfigError(EKGError, ValueError):
    pass


class FormatError(EKGError, ValueError):
    """Malformed binary file (bad magic, truncation)."""


class ConsistencyError(EKGError, ValueError):
    pass


class LoadError(EKGError, ValueError):
    """Checkpoint does not match the requested configuration or data."""
