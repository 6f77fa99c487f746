"""Exception types raised by the solvers."""


class Error(Exception):
    """Base class for errors raised by this package."""


class SpecError(Error, ValueError):
    """Invalid input or a failed derivative self-check."""


class NonFiniteError(Error, ArithmeticError):
    """A solver produced a NaN or infinite value.

    Attributes carry the level and node where the value first appeared and
    which term was being evaluated.
    """

    def __init__(self, term, level, node):
        self.term = term
        self.level = level
        self.node = node
        super().__init__(f"non-finite value in {term} at level {level}, node {node}")


class ConvergenceError(Error, RuntimeError):
    """A fixed-point iteration did not converge."""


class InfeasibleControlError(Error, ValueError):
    """A control takes values outside the admissible set."""
