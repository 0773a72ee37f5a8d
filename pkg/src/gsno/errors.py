"""Exception types shared across the package."""


class GsnoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(GsnoError, ValueError):
    pass


class ResolutionError(GsnoError, ValueError):
    """The grid (or quadrature) is too coarse for the requested band limit."""


class DegenerateTargetError(GsnoError, ValueError):
    pass


class TrainingDiverged(GsnoError, FloatingPointError):
    pass


class FormatError(GsnoError, ValueError):
    """Malformed IDX / SPHF / CSV input."""


class ConfigError(GsnoError, ValueError):
    pass
