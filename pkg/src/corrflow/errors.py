"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new error kinds should
subclass the closest existing category rather than raising bare ValueError.
"""


class CorrflowError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class LayoutError(CorrflowError):
    """Array shape or dimension index inconsistent with the action layout."""

    exit_code = 3


class ConfigError(CorrflowError):
    """Invalid or inconsistent configuration value."""

    exit_code = 3


class SchemaError(CorrflowError):
    """On-disk artifact does not match the expected format or header."""

    exit_code = 3


class MissingInputError(CorrflowError):
    """A referenced input path does not exist."""

    exit_code = 2


class EstimationError(CorrflowError):
    """Statistics requested from an empty or degenerate dataset."""

    exit_code = 3


class FactorizationError(CorrflowError):
    """Cholesky factorization failed; carries the 1-based failing pivot."""

    exit_code = 4

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class InterpolationError(CorrflowError):
    """Spline resampling asked for with too few knots."""

    exit_code = 3


class NumericalError(CorrflowError):
    """Non-finite value produced during integration or inference."""

    exit_code = 4


class TrainingDivergedError(CorrflowError):
    """Training loss exceeded the divergence guard."""

    exit_code = 4


class GenerationError(CorrflowError):
    """Synthetic demonstration generation failed its own verification."""

    exit_code = 4
