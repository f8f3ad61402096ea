"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3.
Plain ValueError is used for invalid arguments to library functions.
"""


class ConfigError(ValueError):
    """A configuration file or parameter set is invalid."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (NaN, divergence, non-convergence)."""

    def __init__(self, message, *, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual
