"""Exception hierarchy shared by all gencoords modules."""


class GenCoordsError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GenCoordsError, ValueError):
    pass


class InsufficientKernelOrder(GenCoordsError, ValueError):
    """A kernel derivative beyond the available series length was requested."""


class InvalidKernel(GenCoordsError, ValueError):
    pass


class DegenerateCovariance(GenCoordsError):
    """Cholesky factorisation failed even after the maximum diagonal jitter."""


class InvalidCovariance(GenCoordsError, ValueError):
    pass


class SingularCovariance(GenCoordsError):
    pass


class SingularHessian(GenCoordsError):
    pass


class OutsideLaplaceDomain(GenCoordsError):
    """The energy Hessian has non-positive determinant at this mean."""


class ZeroVarianceSeries(GenCoordsError, ValueError):
    pass


class UnsupportedOperation(GenCoordsError, ValueError):
    pass


class NoObservationModel(GenCoordsError):
    pass


class ZigzagOverflow(GenCoordsError, FloatingPointError):
    """A non-finite value appeared while solving for generalised coordinates."""

    def __init__(self, order: int, message: str | None = None):
        self.order = order
        super().__init__(message or f"non-finite value while solving order {order}")


class NotEnoughSamples(GenCoordsError, ValueError):
    pass


class EmbeddingError(GenCoordsError):
    pass


class StepSizeError(GenCoordsError, ValueError):
    """The Euler step violates the configured stability guard."""


class FilterError(GenCoordsError):
    pass


class ConfigError(GenCoordsError, ValueError):
    """Invalid run configuration. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
