"""Exception types raised by the library."""


class DirectLikError(Exception):
    """Base class for all library errors."""


class CycleError(DirectLikError):
    def __init__(self, edges=None):
        self.edges = edges
        super().__init__("edge set contains a directed cycle")


class ResamplingError(DirectLikError):
    """Rejection sampling hit its attempt cap."""


class MatrixNotPDError(DirectLikError):
    pass


class IllConditionedError(DirectLikError):
    def __init__(self, message, condition=float("inf")):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class ConstraintViolation(DirectLikError):
    def __init__(self, constraint, detail=""):
        self.constraint = constraint
        msg = f"constraint violated: {constraint}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class LineSearchStall(DirectLikError):
    """Backtracking exhausted its halvings without sufficient decrease."""


class SchemaError(DirectLikError):
    """Input file does not match the expected layout."""
