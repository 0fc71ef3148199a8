"""Exception types raised by femix."""


class FemError(ValueError):
    """Base class for invalid numerical inputs."""


class EmptySupport(FemError):
    """A prior row has no index with positive mass."""


class ConstantValues(FemError):
    """A value column is constant on the prior support, so the temperature is unidentifiable."""


class AbsoluteContinuityError(FemError):
    """KL(p || q) requested with q(i) = 0 where p(i) > 0."""
