"""Exception types shared across the package."""


class SocialNavError(Exception):
    """Base class for all errors raised by socialnav."""


class DegenerateProjection(SocialNavError):
    """The world point lies on the camera plane (projective scale ~ 0)."""


class DegenerateBackProjection(SocialNavError):
    """The viewing ray is parallel to the requested height plane."""


class SingularCovariance(SocialNavError):
    """A covariance could not be inverted even after regularization."""


class NoConvergence(SocialNavError):
    """An iterative solver stopped without meeting its tolerance."""


class MissingJoints(SocialNavError):
    """A pose lacks the joints required for an operation."""


class SteeringOutOfRange(SocialNavError):
    """A steering angle reached +-pi/2 where tan() is undefined."""


class DegenerateSideslip(SocialNavError):
    """cos(beta) vanished in the kinematic model."""


class ConfigError(SocialNavError):
    """Invalid scenario configuration."""
