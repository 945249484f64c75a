"""Exception hierarchy shared across the toolkit.

Commands map these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class EmodistError(Exception):
    """Base class for all toolkit errors."""


class UsageError(EmodistError):
    """Invalid command-line usage or inconsistent configuration."""


class DataError(EmodistError):
    """Malformed or inconsistent input data (files, rows, manifests)."""


class NumericError(EmodistError):
    """Numeric failure during training or inference (e.g. non-finite loss)."""
