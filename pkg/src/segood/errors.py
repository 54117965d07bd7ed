"""Exception taxonomy shared by every module in the package.

Loaders and pipeline code raise these instead of bare ValueError/OSError so
callers (and the CLI exit-code mapping) can tell configuration mistakes,
broken input data, and numerical breakdowns apart.
"""


class SegoodError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SegoodError):
    """A file's container format is malformed: bad magic, truncated or
    unparseable bytes."""


class SchemaError(SegoodError):
    """Data parsed fine but violates the expected structure: wrong dtype,
    shape, class ids, or missing/duplicate fields."""


class ValidationError(SegoodError):
    """Values break a semantic constraint: simplex sums, bounds, or an
    inconsistent configuration."""


class DataIOError(SegoodError):
    """A referenced file is missing or unreadable."""


class IntegrityError(SegoodError):
    """A stored artifact failed its content hash or envelope check."""


class NumericalError(SegoodError):
    """A numerical computation produced an impossible result, e.g. a
    negative squared distance beyond rounding tolerance."""


class EmptyDatasetError(SegoodError):
    """No usable samples remain for an operation that needs at least one."""
