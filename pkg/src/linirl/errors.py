"""Exception hierarchy shared by the solvers, trainer and CLI."""


class LinIrlError(Exception):
    """Base class for all package errors."""


class ValidationError(LinIrlError, ValueError):
    """Malformed input: bad trajectories, files, flags or preconditions."""


class UnknownTransitionError(LinIrlError, KeyError):
    def __init__(self, s, s2):
        super().__init__(f"transition ({s}, {s2}) is not in the kernel support")
        self.s = s
        self.s2 = s2

    def __str__(self):
        return self.args[0]


class NumericalError(LinIrlError, ArithmeticError):
    """Overflow, singular systems, residual failures, invalid z vectors."""


class SingularSystemError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None, iterate=None):
        super().__init__(message)
        self.residual = residual
        self.iterate = iterate
