"""Exception types shared across the package."""


class VoltVarError(Exception):
    """Base class for all package errors."""


class InvalidInputError(VoltVarError, ValueError):
    """Malformed or out-of-range input data."""


class ModelConstructionError(VoltVarError):
    """The network cannot be turned into an electrical model (e.g. it is disconnected)."""


class NumericalError(VoltVarError, ArithmeticError):
    """A matrix that must be invertible is singular or badly conditioned."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class DivergenceError(VoltVarError):
    """An iterative solver failed to converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EmptyDatasetError(VoltVarError):
    """No feasible OPF scenario was available to build a dataset."""


class ParseError(InvalidInputError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(location + message)
        self.path = path
        self.line = line
