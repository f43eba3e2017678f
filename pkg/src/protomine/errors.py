"""Exception types shared across the package."""


class ProtomineError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(ProtomineError):
    """Operands have incompatible or unexpected shapes."""


class ConfigError(ProtomineError):
    """Invalid configuration value or combination."""


class NonFiniteError(ProtomineError):
    """A forward operation produced NaN or Inf values."""


class GraphError(ProtomineError):
    """Autodiff tape misuse: non-scalar loss, tape consumed twice, ..."""


class AllMaskedError(ProtomineError):
    """A softmax slice (attention row) had every position hard-masked."""


class EpisodeError(ProtomineError):
    """Episode violates construction requirements, e.g. an empty support mask."""


class RenderError(ProtomineError):
    """A sample could not be rendered within the dataset constraints."""


class CheckpointError(ProtomineError):
    """Checkpoint file is malformed or incompatible with the model."""
