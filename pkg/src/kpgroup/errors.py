"""Exception hierarchy shared by all kpgroup modules."""


class KpgroupError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(KpgroupError):
    """A value, schema, grouping, or parameter violates its contract."""


class FormatError(KpgroupError):
    """An input file is malformed (bad container, wrong layout, truncation)."""
