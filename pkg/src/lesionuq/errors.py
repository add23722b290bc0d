"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, data-shaped errors -> 3, numeric or
training failures -> 4.
"""


class LesionUQError(Exception):
    """Base class for all package errors."""


class ConfigError(LesionUQError):
    """Invalid or unreadable configuration."""

    exit_code = 2


class FormatError(LesionUQError):
    """Malformed file content (NPY header, dataset line, model blob)."""

    exit_code = 3


class ShapeError(LesionUQError):
    """Array rank or dimensions violate a contract."""

    exit_code = 3


class DataError(LesionUQError):
    """Values violate a contract (non-finite, out of range, wrong dtype)."""

    exit_code = 3


class InputError(LesionUQError):
    """Arguments to an operation violate its preconditions."""

    exit_code = 3


class EvaluationError(LesionUQError):
    """Evaluation undefined for the given records (e.g. no FP lesions)."""

    exit_code = 3


class ReportError(LesionUQError):
    """Inconsistent lesion universe across methods in a report."""

    exit_code = 3


class GenerationError(LesionUQError):
    """Synthetic scene generation could not satisfy its constraints."""

    exit_code = 3


class ModelError(LesionUQError):
    """Model weights inconsistent with the given input."""

    exit_code = 4


class TrainingError(LesionUQError):
    """Degenerate training set or failed fit."""

    exit_code = 4
