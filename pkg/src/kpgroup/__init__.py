"""kpgroup: keypoint grouping, budgeting, and detector-head decoding."""

__version__ = "0.1.0"

from .errors import FormatError, KpgroupError, ValidationError
from .schema import (
    ClassSpec,
    Grouping,
    KeypointSchema,
    ValidityReport,
    check_grouping,
    min_restricted_clusters,
    validate_schema,
)

__all__ = [
    "ClassSpec",
    "FormatError",
    "Grouping",
    "KeypointSchema",
    "KpgroupError",
    "ValidationError",
    "ValidityReport",
    "check_grouping",
    "min_restricted_clusters",
    "validate_schema",
]
