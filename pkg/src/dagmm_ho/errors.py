"""Exception hierarchy shared across the package.

The command line maps these onto exit codes: ParameterError and its
subclasses mean a usage/configuration problem (exit 1), DataError means
unusable input data or files (exit 2), NumericError means a numerical
failure (exit 3).
"""


class DagmmHoError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(DagmmHoError):
    """Invalid argument, configuration value, or hyper-parameter."""


class DimensionError(ParameterError):
    """Array shape incompatible with the operation or the model."""


class DataError(DagmmHoError):
    """Input data is unusable (degenerate, single-class, missing)."""


class FormatError(DataError):
    """Malformed file contents: bad magic, bad header, truncated payload."""


class UnsupportedFormatError(FormatError):
    """File is well formed but uses an encoding this package does not read."""


class NumericError(DagmmHoError):
    """Numerical failure: non-finite values, no convergence, factorization."""


class NotPositiveDefiniteError(NumericError):
    """Matrix is not positive definite (Cholesky factorization failed)."""


class TrainingDivergedError(NumericError):
    """The joint objective became non-finite during training.

    Carries the parameters from the last step that still produced a finite
    objective, plus the name of the term that went non-finite.
    """

    def __init__(self, message, checkpoint=None, term=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.term = term
