"""Exception types shared across the package."""


class AdvJudgeError(Exception):
    """Base class for all errors raised by advjudge."""


class InvalidArgumentError(AdvJudgeError, ValueError):
    """An argument is outside the domain an operation accepts."""


class FormatError(AdvJudgeError, ValueError):
    """A file does not follow the expected binary or text layout."""


class NumericError(AdvJudgeError, ArithmeticError):
    """A computation produced NaN or infinite values."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
