"""Exception types shared across the package."""


class DatagradError(Exception):
    """Base class for all package errors."""


class ShapeError(DatagradError):
    """Tensor names or dimensions do not match."""


class EmptyBatch(DatagradError):
    """An operation that needs at least one example got none."""


class ConfigError(DatagradError):
    """Invalid or inconsistent configuration."""


class InvalidStep(DatagradError):
    """Finite-difference step size must be positive."""


class RegionError(DatagradError):
    """Requested patch lies outside the named tensor."""


class UnknownTensor(DatagradError):
    """No tensor with the requested name."""


class VocabError(DatagradError):
    """Symbol id outside the vocabulary."""


class NumericalBlowup(DatagradError):
    """A non-finite value appeared mid-computation.

    ``step`` holds the optimizer-step index at which it was detected,
    when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EnumerationBudgetExceeded(DatagradError):
    """The dataset space is too large to enumerate."""
