"""Exception types raised across the package."""


class FlowDepthError(Exception):
    """Base class for all errors raised by flowdepth."""


class DomainError(FlowDepthError, ValueError):
    """An argument lies outside the domain of the operation."""


class BehindCameraError(DomainError):
    """A 3D point has non-positive depth and cannot be projected."""


class ShapeError(FlowDepthError, ValueError):
    """Raster dimensions do not agree."""


class ConfigError(FlowDepthError, ValueError):
    """A configuration value violates its invariant."""


class EmptyDomainError(FlowDepthError, ValueError):
    """No valid pixel is left to evaluate on."""


class ConsistencyError(FlowDepthError, ValueError):
    """Inputs contradict each other (e.g. overlapping region claims)."""


class DegenerateParallaxError(FlowDepthError, ValueError):
    """Depth is unobservable because the pose has no translation."""


class OptimizationError(FlowDepthError, RuntimeError):
    """The optimizer produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ProbeError(FlowDepthError, RuntimeError):
    """A finite-difference probe evaluated to a non-finite loss."""


class FormatError(FlowDepthError, ValueError):
    """A file does not have the expected raster layout."""


class ParseError(FlowDepthError, ValueError):
    """A text file could not be parsed."""


class SpecError(FlowDepthError, ValueError):
    """A synthetic scene specification is invalid."""
