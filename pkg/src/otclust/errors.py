"""Exception hierarchy shared by every module."""


class OtclustError(Exception):
    """Base class for all package errors."""


class ValidationError(OtclustError):
    """Malformed input: bad file rows, inconsistent dimensions, invalid config."""


class NumericalError(OtclustError):
    """Fatal numerical failure: NaN or overflow inside an iterative solver."""


class DivergenceError(OtclustError):
    """Training loss became NaN or grew past the divergence guard threshold."""
