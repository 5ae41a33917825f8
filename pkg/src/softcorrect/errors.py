"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration values or missing referenced files."""


class GeometryError(ValueError):
    """Degenerate or inverted geometry."""


class SingularMaterialError(ValueError):
    """Material parameters outside the invertible range (nu >= 0.5)."""


class SolverError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DivergedError(RuntimeError):
    """Stepping was requested on a simulation already flagged as diverged."""


class RankError(ValueError):
    """Point correspondences are collinear or otherwise rank deficient."""


class RegistrationError(RuntimeError):
    pass


class EmptyResultError(ValueError):
    """A filter removed every point."""


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ScriptError(ValueError):
    """Invalid probe script."""


class GenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class SearchError(RuntimeError):
    pass


class MissingArtifactError(ConfigurationError):
    """A prerequisite file or directory of a pipeline step does not exist."""
