"""Exception hierarchy shared by all turnpike_lab modules."""


class TurnpikeLabError(Exception):
    """Base class for every error raised by this package."""


class EmptyControlSupport(TurnpikeLabError, ValueError):
    pass


class SolveFailure(TurnpikeLabError):
    """A linear solve failed (singular or ill-posed system)."""


class SingularGenerator(SolveFailure):
    pass


class ConstraintViolation(TurnpikeLabError, ValueError):
    """A control sample lies outside its box.

    ``index`` is the time index of the first offending sample.
    """

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class InfeasibleBox(TurnpikeLabError, ValueError):
    pass


class NonConvergence(TurnpikeLabError):
    """An iterative method hit its iteration budget.

    ``result`` carries the best iterate when one exists, so callers that
    prefer a flagged answer over an exception can still use it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NewtonDivergence(NonConvergence):
    pass


class SearchSpaceTooLarge(TurnpikeLabError, ValueError):
    pass


class Infeasible(TurnpikeLabError):
    pass


class SlaterViolated(TurnpikeLabError):
    pass


class DegenerateSample(TurnpikeLabError):
    pass


class EmptyCollection(TurnpikeLabError, ValueError):
    pass


class InsufficientData(TurnpikeLabError, ValueError):
    pass


class SchemaError(TurnpikeLabError, ValueError):
    """Config document does not match the schema; ``path`` is a JSON pointer."""

    def __init__(self, message, path=""):
        super().__init__(f"{path or '/'}: {message}")
        self.path = path


class ValidationError(TurnpikeLabError, ValueError):
    def __init__(self, message, field=""):
        super().__init__(message)
        self.field = field
