"""Exception hierarchy shared by every opendet module."""


class OpenDetError(Exception):
    """Base class for all errors raised by opendet."""


class DomainError(OpenDetError, ValueError):
    """An argument lies outside the domain of an operation."""


class ShapeError(OpenDetError, ValueError):
    """Tensor extents do not line up."""


class InvalidCameraError(OpenDetError, ValueError):
    """Singular intrinsic or non-rigid extrinsic matrix."""


class BehindCameraError(OpenDetError, ValueError):
    """A point has nonpositive depth in the camera frame."""


class InvalidRangeError(OpenDetError, ValueError):
    """Perception range is degenerate on some axis."""


class UndefinedMetricError(OpenDetError, ValueError):
    """A metric was requested over an empty population."""


class GenerationError(OpenDetError, RuntimeError):
    """Scene generation ran out of rejection-sampling budget."""


class ConfigError(OpenDetError, ValueError):
    """Malformed configuration text or unknown key."""


class FormatError(OpenDetError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
