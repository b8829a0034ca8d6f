"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError``; the classes here cover the
failure modes that need to be told apart by callers.
"""


class SingularMatrixError(ArithmeticError):
    """Cholesky factorization failed even at the largest ladder jitter."""

    def __init__(self, message, jitter_tried=None):
        super().__init__(message)
        self.jitter_tried = jitter_tried


class DivergedChainError(RuntimeError):
    """A sampler chain produced a non-finite gradient or state.

    Attributes
    ----------
    group : str
        Name of the first coordinate group that went non-finite.
    last_finite_index : int
        Index of the last retained sample known to be finite (-1 when the
        chain diverged before retaining anything).
    """

    def __init__(self, message, group=None, last_finite_index=-1):
        super().__init__(message)
        self.group = group
        self.last_finite_index = last_finite_index


class DiagnosticUndefinedError(ValueError):
    """A diagnostic (R-hat, AUC, signed-rank test) is undefined for the input."""


class TrainingDivergedError(RuntimeError):
    """An optimizer produced a non-finite objective value."""


class ParseError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
