"""Exception types raised across the package."""


class QRTDError(Exception):
    """Base class for all package errors."""


class DataError(QRTDError, ValueError):
    """Malformed or unusable input data."""


class NoEventsError(DataError):
    """The dataset carries no observed failures."""

    def __init__(self, message="no events: every subject is censored"):
        super().__init__(message)


class WarpRangeError(QRTDError, OverflowError):
    """The linear predictor left the range where exp() is finite."""


class IngestError(DataError):
    """A counting-process file failed validation.

    ``row`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message, row=None, subject=None):
        self.row = row
        self.subject = subject
        where = []
        if row is not None:
            where.append(f"row {row}")
        if subject is not None:
            where.append(f"subject {subject!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class CalibrationError(QRTDError, RuntimeError):
    """Censoring-rate calibration could not reach its target."""


class BootstrapError(QRTDError, RuntimeError):
    """Too few bootstrap replicates converged to summarise."""
