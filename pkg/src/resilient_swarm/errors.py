"""Exception types raised across the package."""


class SwarmError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SwarmError, ValueError):
    pass


class DimensionError(SwarmError, ValueError):
    pass


class NumericalError(SwarmError, ArithmeticError):
    """An iterative routine failed to converge or a matrix was singular."""


class InsufficientAnchorsError(SwarmError):
    """Fewer than D + 1 trusted anchors are available for a position fix."""


class SingularGeometryError(NumericalError):
    """Anchor geometry does not determine a unique position (e.g. collinear)."""


class ConfigError(SwarmError, ValueError):
    """A scenario configuration failed to parse or validate."""
