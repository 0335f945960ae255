"""Exception and warning types shared across modules."""


class OrthoforgeError(Exception):
    pass


class DegenerateCameraError(OrthoforgeError):
    """RPC denominator vanished at the evaluation point."""


class NonConvergenceError(OrthoforgeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IllConditionedError(OrthoforgeError):
    """Near-parallel rays: the height is unobservable."""


class NoSignalError(OrthoforgeError):
    """Raster has zero variance; correlation is undefined."""


class DependencyError(OrthoforgeError):
    """A pipeline stage was requested before an upstream stage produced its outputs."""

    def __init__(self, stage, missing):
        super().__init__(f"run stage '{stage}' first: missing {missing}")
        self.stage = stage
        self.missing = missing


class ValidationError(OrthoforgeError):
    pass


class RpcDomainWarning(UserWarning):
    """Evaluation outside the RPC normalisation box."""


class GaugeWarning(UserWarning):
    """Bundle adjustment bias gauge left unconstrained."""
