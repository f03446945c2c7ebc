"""Exception types shared across the package."""


class PointBoxError(Exception):
    """Base class for all package errors."""


class FewerThanTwoPoints(PointBoxError, ValueError):
    """Nearest-neighbour distances need at least two points."""


class SpecInfeasible(PointBoxError, ValueError):
    """A scene spec cannot be realised (bad parameters or no room for heads)."""


class SceneIOError(PointBoxError, OSError):
    """A scene file is missing, unreadable or truncated."""


class FormatError(PointBoxError, ValueError):
    """A file parsed but its content is malformed.

    ``location`` carries a human readable position (line/column or byte offset).
    """

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class InsufficientData(PointBoxError, ValueError):
    pass


class IndivisibleImage(PointBoxError, ValueError):
    pass


class ShapeError(PointBoxError, ValueError):
    pass


class DegenerateDataset(PointBoxError, ValueError):
    pass


class TooFewImages(PointBoxError, ValueError):
    pass


class NumericFailure(PointBoxError, FloatingPointError):
    """Training produced a non-finite loss."""
