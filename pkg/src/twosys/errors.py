"""Exception types shared across the package."""


class DataError(ValueError):
    """Input array has the wrong shape or contains non-finite values."""


class FactorizationError(ValueError):
    """A matrix expected to be positive definite is not."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class ImproperPosteriorError(RuntimeError):
    """Mode search diverged: the gradient norm kept growing."""


class ConvergenceError(RuntimeError):
    """An iterative routine ran out of its iteration budget."""


class SamplingError(RuntimeError):
    """A sampler produced a non-finite state after an accepted move."""


class ConfigError(ValueError):
    """Experiment configuration failed validation.

    ``path`` is the dotted location of the offending key.
    """

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
