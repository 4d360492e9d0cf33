"""Exception and warning types shared by all modules."""


class SubmaxError(Exception):
    """Base class for package errors."""


class ShapeError(SubmaxError, ValueError):
    """Dimension or shape mismatch between operands."""


class DomainError(SubmaxError, ValueError):
    """Argument outside the domain of an operation."""


class ValidationError(SubmaxError, ValueError):
    """Configuration failed validation; ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DisjointnessError(SubmaxError, ValueError):
    """Selection regions that should be disjoint overlap."""

    def __init__(self, pair, message=None):
        self.pair = pair
        super().__init__(message or f"regions of plates {pair[0]} and {pair[1]} overlap")


class FlagWarning(UserWarning):
    """Non-fatal condition that is also recorded in output metadata."""


class ReportIOError(SubmaxError, OSError):
    """A report or checkpoint file could not be written or read."""

    def __init__(self, path, cause=None):
        self.path = str(path)
        reason = getattr(cause, "strerror", None) or str(cause or "I/O failure")
        super().__init__(f"{self.path}: {reason}")


class BudgetExceeded(SubmaxError, RuntimeError):
    """Every sweep point ran past its wall-clock budget."""
