"""Exception types raised across the package."""


class NtkLabError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(NtkLabError, ValueError):
    """Cholesky factorization failed, even after adding jitter."""


class NoConvergence(NtkLabError, RuntimeError):
    """An iterative routine exhausted its iteration budget."""


class DimensionMismatch(NtkLabError, ValueError):
    pass


class LayoutMismatch(NtkLabError, ValueError):
    pass


class DivergentLearningRate(NtkLabError, ValueError):
    """Learning rate lies outside the window where descent converges."""


class Diverged(NtkLabError, RuntimeError):
    """Training loss blew up past the divergence threshold."""


class ParseError(NtkLabError, ValueError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class MissingColumn(NtkLabError, KeyError):
    pass
