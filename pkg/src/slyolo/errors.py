"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes (config 2, state 3, runtime 4), so
library code should raise the most specific class that applies.
"""


class SLYoloError(Exception):
    """Base class for all package errors."""


class ConfigError(SLYoloError):
    """Invalid configuration: bad channel counts, unknown enum values, bad YAML keys."""


class ShapeError(SLYoloError):
    """Tensor shape violates a block contract (divisibility, concat mismatch, ...)."""


class StateError(SLYoloError):
    """Operation not valid for the object's current state (e.g. fusing twice)."""


class NumericError(SLYoloError):
    """Non-finite or otherwise invalid numeric result."""


class AuditError(SLYoloError):
    """Complexity audit met a layer it cannot account for."""


class AnnotationParseError(SLYoloError):
    """Malformed annotation line; carries the offending line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message if line_number is None else f"line {line_number}: {message}")
        self.line_number = line_number
