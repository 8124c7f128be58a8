"""Exception hierarchy shared across the package."""


class SepModelError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(SepModelError, ValueError):
    """Parameters violate a structural invariant (simplex, rate ordering, ...)."""


class DomainError(SepModelError, ValueError):
    """An argument lies outside the domain of the function."""


class LogDomainError(SepModelError, ArithmeticError):
    """A density or probability is too small to take its logarithm.

    ``index`` identifies the offending observation when known.
    """

    def __init__(self, message, index=None, kind=None):
        super().__init__(message)
        self.index = index
        self.kind = kind


class TailUnderflowError(SepModelError, ArithmeticError):
    pass


class UnsupportedOrderError(SepModelError, ValueError):
    pass


class NonConvergenceError(SepModelError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class NotOverdispersedError(SepModelError, ValueError):
    pass


class InsufficientDataError(SepModelError, ValueError):
    pass


class DataFormatError(SepModelError, ValueError):
    """Malformed input row; ``line`` is the 1-based line number in the file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InfiniteSojournError(SepModelError, ValueError):
    """A client that never exits has an unbounded expected sojourn."""
