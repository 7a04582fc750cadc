"""Exception hierarchy shared by every fedqsn module."""


class FedQSNError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(FedQSNError, ValueError):
    pass


class InvalidConfig(FedQSNError, ValueError):
    pass


class InvalidSpec(FedQSNError, ValueError):
    pass


class EmptyDataset(FedQSNError, ValueError):
    pass


class EmptyUpdateSet(FedQSNError, ValueError):
    pass


class ZeroVector(FedQSNError, ValueError):
    pass


class ParseError(FedQSNError, ValueError):
    """Malformed input. ``location`` names the row, column or config key."""

    def __init__(self, message: str, location: str | None = None):
        super().__init__(message)
        self.location = location


class MissingColumn(FedQSNError, KeyError):
    pass


class ValidationError(FedQSNError, ValueError):
    pass


class InvalidAxis(FedQSNError, ValueError):
    pass


class CorruptCheckpoint(FedQSNError, ValueError):
    pass
