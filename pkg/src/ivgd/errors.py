"""Exception hierarchy shared by every module."""


class ValidationError(ValueError):
    """Bad input: wrong shape, out-of-range value, inconsistent arguments."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """A persisted file does not match the expected schema or version."""


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values or a diverging iteration."""


class InvertibilityError(NumericError):
    """Inversion requested for an operator without a contraction certificate."""


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class IterationError(NumericError):
    pass


class UndefinedMetricError(ValueError):
    pass
