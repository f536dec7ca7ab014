"""Exception hierarchy shared across the package.

``ValidationError`` subclasses mark bad user input (CLI exit code 2);
everything else under ``FgmilError`` is a runtime failure (exit code 1).
"""


class FgmilError(Exception):
    """Base class for all package errors."""


class ValidationError(FgmilError):
    """Invalid user-supplied input: config, files, arguments."""


class ShapeError(FgmilError):
    """Tensor shapes incompatible with the requested operation."""


class DegenerateRowError(FgmilError):
    """A masked reduction saw a row with no valid entries."""


class NormalizationError(FgmilError):
    """A zero-norm row cannot be normalized."""


class StaleGradientError(FgmilError):
    """Optimizer step requested while a parameter has no gradient."""


class DeterminismError(FgmilError):
    """Two forward passes of a supposedly deterministic computation disagree."""


class MalformedAnswerError(ValidationError):
    """Standardizer answer text does not split into the six expected segments."""

    def __init__(self, message: str, text: str):
        super().__init__(message)
        self.text = text


class UnsupportedReportError(ValidationError):
    """Report body carries no recognizable ground-truth markers."""


class EmptyDescriptionError(FgmilError):
    """Guidance construction requires at least one known field."""


class EmptyTextError(FgmilError):
    """Text encoder received a text that tokenizes to nothing."""


class UndefinedMetricError(FgmilError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class TrainingDivergedError(FgmilError):
    """Loss became non-finite; carries the bag ids of the offending batch."""

    def __init__(self, message: str, bag_ids: list[str]):
        super().__init__(message)
        self.bag_ids = bag_ids
