from typing import Any, Optional


class GravityModelError(Exception):
    """Base class for every error raised by the library."""

    def __init__(self, message: str = "Gravity model error"):
        self.message = message
        super().__init__(self.message)


class MeshError(GravityModelError):
    """Exception raised when a shape model violates the closed-manifold contract."""

    def __init__(self, message: str = "Invalid mesh"):
        super().__init__(message)


class OnSurfaceError(GravityModelError):
    """Exception raised when a field point lies on a facet or an edge of a shape model."""

    def __init__(
        self,
        message: str = "Field point lies on the surface",
        facet: Optional[int] = None,
        edge: Optional[int] = None,
    ):
        self.facet = facet
        self.edge = edge
        super().__init__(message)


class SingularityError(GravityModelError):
    """Exception raised when a field point coincides with a point singularity."""

    def __init__(self, message: str = "Field point coincides with a singularity"):
        super().__init__(message)


class NonFiniteError(GravityModelError):
    """Exception raised when a network intermediate, loss or gradient stops being finite."""

    def __init__(
        self,
        message: str = "Non-finite value encountered",
        layer: Optional[int] = None,
        sample: Optional[int] = None,
        epoch: Optional[int] = None,
        step: Optional[int] = None,
    ):
        self.layer = layer
        self.sample = sample
        self.epoch = epoch
        self.step = step
        super().__init__(message)


class ScalingError(GravityModelError):
    """Exception raised when the potential scale of the training data is not positive."""

    def __init__(
        self,
        message: str = "Potential scale U* is not positive; exclude the low-fidelity model from the maximum",
    ):
        super().__init__(message)


class RegressionError(GravityModelError):
    """Exception raised when a linear regression cannot proceed."""

    def __init__(self, message: str = "Regression failed"):
        super().__init__(message)


class KeplerError(GravityModelError):
    """Exception raised when Kepler's equation does not converge."""

    def __init__(self, message: str = "Kepler's equation did not converge"):
        super().__init__(message)


class PropagationError(GravityModelError):
    """Exception raised when orbit integration aborts. Carries the partial trajectory."""

    def __init__(self, message: str = "Propagation failed", trajectory: Any = None):
        self.trajectory = trajectory
        super().__init__(message)


class TrainingDivergedError(GravityModelError):
    """Exception raised when the training loss diverges. Carries the history recorded so far."""

    def __init__(self, message: str = "Training diverged", history: Any = None):
        self.history = history
        super().__init__(message)


class ConfigError(GravityModelError):
    """Exception raised when an experiment configuration is invalid."""

    def __init__(self, message: str = "Invalid configuration"):
        super().__init__(message)
