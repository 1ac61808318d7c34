"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class ValidationError(ValueError):
    """A constructed object violates one of its invariants."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalError(RuntimeError):
    """A linear-algebra step is too ill conditioned to trust."""


class ConfigError(ValueError):
    """A scenario configuration is missing or malformed; names the field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
