"""Exception types shared across the package."""


class FedAlignError(Exception):
    """Base class for every error raised by fedalign."""


class ValidationError(FedAlignError, ValueError):
    """An input violates a documented invariant."""


class ConvergenceError(FedAlignError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    ``violation`` carries the residual that was achieved and ``context``
    names where the failure happened (phase, agent, channel).
    """

    def __init__(self, message, violation=None, context=None):
        self.base_message = message
        self.violation = violation
        self.context = dict(context or {})
        if self.context:
            where = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} [{where}]"
        super().__init__(message)

    def with_context(self, **context):
        return ConvergenceError(
            self.base_message,
            violation=self.violation,
            context={**self.context, **context},
        )


class NumericalError(FedAlignError, ArithmeticError):
    """Overflow or underflow inside a solver."""


class DatasetFormatError(FedAlignError, OSError):
    """A dataset file or directory is malformed or unreadable."""
