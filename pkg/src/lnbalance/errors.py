"""Exception hierarchy shared by all modules."""


class LnBalanceError(Exception):
    """Base class for every error raised by this package."""


class DataError(LnBalanceError, ValueError):
    """Input data could not be parsed or failed validation."""


class SnapshotParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class SchemaMismatchError(DataError):
    pass


class CorruptModelError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class InvariantError(LnBalanceError, AssertionError):
    """An internal consistency check failed; indicates a bug, not bad input."""
