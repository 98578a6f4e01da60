"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration errors exit 2,
data/protocol errors exit 3, I/O errors exit 4.
"""


class UncerankError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UncerankError):
    """Invalid or missing configuration (exit code 2)."""


class DataError(UncerankError):
    """Invalid, insufficient, or degenerate data (exit code 3)."""


class ProtocolError(UncerankError):
    """Callers violated an operation's contract (exit code 3)."""


class ShapeError(ProtocolError):
    """Array dimensions do not match the model or operation."""


class UnknownIdError(DataError):
    """Lookup of a user or item id that does not exist in the world."""


class CalibrationError(DataError):
    """Calibration split too small or otherwise unusable."""


class UndefinedCorrelationError(DataError):
    """Correlation requested on constant (zero-variance) input."""


class OutputIOError(UncerankError):
    """Filesystem failure while persisting artifacts (exit code 4)."""
