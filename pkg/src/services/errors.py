"""Typed failures raised by the inference engine.

Each class carries the process exit code the command line maps it to.
"""


class RStarError(Exception):
    exit_code = 5

    def __init__(self, message, *, psi=None, theta=None, trace=None):
        super().__init__(message)
        self.psi = psi
        self.theta = theta
        self.trace = trace or []

    def at_psi(self, psi):
        """Tag the error with the interest value being evaluated."""
        self.psi = psi
        if self.args and "psi=" not in str(self.args[0]):
            self.args = (f"{self.args[0]} (psi={psi:.10g})",) + self.args[1:]
        return self


class ConfigError(RStarError):
    exit_code = 2


class DataError(RStarError):
    exit_code = 3


class InvalidParameterError(DataError):
    pass


class ConvergenceError(RStarError):
    exit_code = 4


class DivergenceError(ConvergenceError):
    pass


class ConditioningError(RStarError):
    pass


class CurvatureError(RStarError):
    pass


class ProfileInconsistencyError(RStarError):
    pass


class SignInconsistencyError(RStarError):
    pass


class BracketError(RStarError):
    pass


class PreconditionError(RStarError):
    pass
