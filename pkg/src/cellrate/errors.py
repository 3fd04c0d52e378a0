"""Exception types shared across the package."""


class CellrateError(Exception):
    """Base class for all package errors."""


class ConfigError(CellrateError, ValueError):
    """Invalid scenario or run configuration."""


class ConvergenceError(CellrateError, RuntimeError):
    """An iterative solver did not reach its tolerance.

    Attributes
    ----------
    residual : float
        Last residual observed before giving up.
    trace : list
        Optional per-iteration records collected by the solver.
    """

    def __init__(self, message, residual=float("nan"), trace=None):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual
        self.trace = trace if trace is not None else []
