"""Exception types shared across the toolkit."""


class VislamError(Exception):
    """Base class for all toolkit-specific errors."""


class DegenerateMotionError(VislamError):
    """The sensor motion does not make the requested variables observable."""


class InsufficientDataError(VislamError):
    """Not enough keyframes/measurements for the requested operation."""


class BehindCameraError(VislamError):
    """A point has non-positive depth in the camera frame."""


class TrackingLostError(VislamError):
    """Too few usable observations to constrain the current frame."""


class NumericalFailureError(VislamError):
    """An optimization or factorization failed numerically."""


class DataFormatError(VislamError):
    """A file could not be parsed; message carries path and line number."""


class InvalidModelError(VislamError):
    """A trajectory/simulation configuration violates its physical bounds."""
