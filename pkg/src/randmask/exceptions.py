"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed arguments: bad shapes, out-of-range parameters."""


class PreconditionError(ValueError):
    """Input violates a hypothesis the computation relies on."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class NumericError(ArithmeticError):
    """Non-finite values produced during a computation."""


class PretrainingFailedError(RuntimeError):
    pass


class NoValidCellError(ValueError):
    pass
