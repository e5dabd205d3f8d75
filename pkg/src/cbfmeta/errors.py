"""Exception types shared across the package."""


class CbfMetaError(Exception):
    """Base class for every error raised by this package."""


class SamplingBudgetExceeded(CbfMetaError):
    """Obstacle rejection sampling ran out of attempts."""


class WrongKind(CbfMetaError):
    """Operation applied to an obstacle of the wrong kind."""


class InsufficientNeighbors(CbfMetaError):
    """A surface hit has no same-obstacle neighbor to estimate a normal from."""


class FormatMismatch(CbfMetaError):
    """A serialized container is corrupted or inconsistent with its header."""


class NumericalBreakdown(CbfMetaError):
    """A positive-definite factorization failed or a loss became non-finite."""


class DomainError(CbfMetaError):
    """Inputs left the mathematical domain of a formula (reported, never clamped)."""


class NearSingularNorm(CbfMetaError):
    """The weighted feature norm is too small for a stable bound gradient."""


class EmptyTask(CbfMetaError):
    """Task construction produced no usable surface data."""


class CapacityExceeded(CbfMetaError):
    """A data buffer reached its hard capacity."""


class DegenerateRow(CbfMetaError):
    """A barrier constraint row has zero input sensitivity and is violated."""


class IllConditioned(CbfMetaError):
    """No hyperparameter candidate produced a factorizable kernel matrix."""


class ConfigInvalid(CbfMetaError):
    """A run configuration failed schema validation."""


class ArtifactWriteFailure(CbfMetaError):
    """An output artifact could not be written."""
