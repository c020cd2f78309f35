"""Exception hierarchy shared across the pipeline.

Every error carries a machine-readable category and a process exit code so
the CLI can fail with a stable contract.
"""


class CanlmError(Exception):
    """Base class for all pipeline errors."""

    category = "error"
    exit_code = 1


class SchemaError(CanlmError):
    """Invalid signal schema (duplicate names, bad ranges, malformed file)."""

    category = "schema"
    exit_code = 5


class CalibrationError(CanlmError):
    category = "calibration"
    exit_code = 5


class InsufficientDataError(CalibrationError):
    """A feature had no valid samples (or too few) to calibrate."""

    category = "insufficient-data"
    exit_code = 5


class HashMismatchError(CanlmError):
    """A chained artifact was produced under a different schema/calibration/vocab."""

    category = "stale-artifact"
    exit_code = 4


class MissingInputError(CanlmError):
    category = "missing-input"
    exit_code = 3


class StructureError(CanlmError):
    """Malformed token stream or frame window (wrong count, bad ordering)."""

    category = "structure"
    exit_code = 5


class TaskError(CanlmError):
    """A downstream task cannot be built as requested (empty class, bad ratio)."""

    category = "task"
    exit_code = 6


class ComparisonError(CanlmError):
    """Transfer comparison between arms trained under unequal budgets."""

    category = "invalid-comparison"
    exit_code = 6
