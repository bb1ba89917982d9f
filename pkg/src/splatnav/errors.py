"""Exception types shared across the package."""


class SplatNavError(Exception):
    """Base class for package errors."""


class DegenerateCovarianceError(SplatNavError, ValueError):
    pass


class DimensionError(SplatNavError, ValueError):
    pass


class DegenerateInputError(SplatNavError, ValueError):
    pass


class SceneFormatError(SplatNavError, ValueError):
    pass


class LayoutInfeasibleError(SplatNavError, RuntimeError):
    pass


class EpisodeClosedError(SplatNavError, RuntimeError):
    pass


class UsageError(SplatNavError, RuntimeError):
    """API misuse, e.g. calling backward twice on one graph."""


class NonFiniteError(SplatNavError, FloatingPointError):
    """A NaN/Inf appeared in a loss or network output."""


class InvalidRecordError(SplatNavError, ValueError):
    pass


class CheckpointError(SplatNavError, ValueError):
    pass


class NoNegativesError(SplatNavError, ValueError):
    pass
