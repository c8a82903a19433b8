"""Exception hierarchy shared by all effdyn modules."""


class EffdynError(Exception):
    """Base class for every error raised by effdyn."""


class ConfigurationError(EffdynError):
    """Inconsistent system definition or experiment configuration."""


class EvaluationError(EffdynError):
    """A callback or finite-difference stencil produced non-finite values."""


class DegenerateCoordinateError(EffdynError):
    """The reaction coordinate has rank-deficient gradient at a point."""


class NearSingularError(EffdynError):
    """An SPD matrix has an eigenvalue below the admissible floor."""


class InputError(EffdynError):
    """Malformed numerical input (wrong shape, asymmetric matrix, ...)."""


class DivergenceError(EffdynError):
    """A stochastic integrator produced a non-finite state."""

    def __init__(self, message, step=None, replica=None):
        super().__init__(message)
        self.step = step
        self.replica = replica

    def __str__(self):
        parts = [super().__str__()]
        if self.step is not None:
            parts.append(f"step={self.step}")
        if self.replica is not None:
            parts.append(f"replica={self.replica}")
        return " ".join(parts)


class ProjectionError(EffdynError):
    """Newton projection onto a level set did not converge."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class EstimationError(EffdynError):
    """A statistical estimator could not produce a trustworthy value."""


class OracleError(EffdynError):
    """Deterministic quadrature failed to reach its tolerance."""

    def __init__(self, message, achieved=float("nan")):
        super().__init__(message)
        self.achieved = achieved


class UnsupportedGeometryError(EffdynError):
    """Requested computation is only implemented for simpler fibers."""


class QueryError(EffdynError):
    """A bound query is missing inputs or has invalid parameters."""


class RegimeError(QueryError):
    """Dissipative bound requested outside its regime of validity."""


class FitError(EffdynError):
    """Scaling fit received invalid data."""
