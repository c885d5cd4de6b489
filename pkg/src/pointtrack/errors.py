"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes or dimensions do not satisfy an operation's contract."""


class ParameterError(ValueError):
    """A scalar parameter is out of its valid range."""


class CapacityError(RuntimeError):
    """Input exceeds a configured capacity (e.g. offline max length)."""


class StreamError(RuntimeError):
    """Frames arrived out of order in an online stream."""


class TrainingError(RuntimeError):
    """Training cannot proceed (empty dataset, non-finite loss, nothing to learn from)."""
