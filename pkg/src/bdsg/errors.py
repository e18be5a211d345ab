"""Exception hierarchy shared by every stage of the pipeline."""


class BdsgError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BdsgError, ValueError):
    """Invalid construction parameters or experiment configuration."""


class ShapeError(BdsgError, ValueError):
    """Array dimensions do not line up."""


class NumericError(BdsgError, ArithmeticError):
    """A loss or gradient became non-finite.

    ``term`` names the offending quantity (e.g. ``"l0"`` or a parameter index).
    """

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class InversionError(NumericError):
    """Fixed-point inversion of a residual block did not converge."""

    def __init__(self, message, residual=None, index=None):
        super().__init__(message, term="inverse")
        self.residual = residual
        self.index = index


class UndefinedMetricError(BdsgError, ValueError):
    """A ranking metric is undefined for the given labels."""


class ParseError(BdsgError, ValueError):
    """Malformed dataset file; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingAborted(NumericError):
    """Training hit a non-finite loss; carries the last good model and history."""

    def __init__(self, message, term=None, model=None, history=None):
        super().__init__(message, term=term)
        self.model = model
        self.history = history
