"""Exception types shared across the package."""


class DragkitError(Exception):
    """Base class for all dragkit errors."""


class InvalidInputError(DragkitError):
    """Malformed or out-of-contract input (shapes, coordinates, NaNs)."""


class DegenerateMaskError(DragkitError):
    """A mask with no positive support cannot be normalized."""


class InvalidStepError(DragkitError):
    """A diffusion step was requested outside the schedule bounds."""


class ConfigurationError(DragkitError):
    """Inconsistent component configuration (layer counts, unknown keys)."""


class TrainingDivergedError(DragkitError):
    """Readout training produced a non-finite loss."""


class DivergedOptimizationError(DragkitError):
    """A drag update produced a non-finite gradient; the session is preserved."""
