"""Exception types shared across the toolkit."""


class CalibLabError(Exception):
    """Base class for toolkit errors."""


class DomainError(CalibLabError, ValueError):
    """An argument lies outside the admissible radial domain."""


class CenterSingularityError(DomainError):
    """The center point p was passed where only punctured-ball points are valid."""


class ProfileError(CalibLabError, ValueError):
    """A warp profile violates the positivity / monotonicity hypotheses."""


class QuadratureError(CalibLabError, RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class MeshError(CalibLabError, ValueError):
    """A mesh violates the disk / center / boundary invariants."""


class FluxPreconditionError(CalibLabError, ValueError):
    """A flux cut radius is too large for the mesh's center star."""
