"""Exception types raised across the package."""


class KeibsError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(KeibsError, ValueError):
    """An argument violates a documented precondition."""


class DomainError(KeibsError, ValueError):
    """A point lies outside the domain of a kernel or objective."""


class SingularityError(KeibsError, ArithmeticError):
    """A closed-form inverse hit a zero (or sign-violating) denominator."""


class NumericalError(KeibsError, ArithmeticError):
    """An iterative solve failed or a quantity left its admissible range."""


class ConfigError(KeibsError):
    """Experiment configuration failed validation.

    ``problems`` holds one message per offending field, each prefixed with
    the dotted field path.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SimulationError(KeibsError, RuntimeError):
    """An objective evaluation failed; ``evaluation`` is its 0-based index within the run."""

    def __init__(self, evaluation: int, cause: BaseException):
        self.evaluation = evaluation
        super().__init__(f"objective evaluation {evaluation} failed: {cause!r}")
