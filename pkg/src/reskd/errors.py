"""Exception hierarchy shared by every reskd module."""


class ReskdError(Exception):
    """Base class for all library errors."""


class ShapeError(ReskdError, ValueError):
    pass


class DomainError(ReskdError, ValueError):
    pass


class TraceError(ReskdError):
    """An activation trace does not belong to (or is older than) the network."""


class DivergenceError(ReskdError, ArithmeticError):
    """Non-finite gradients or losses during optimization."""


class TrainingError(ReskdError):
    """Training failed; ``stage`` names the pipeline stage that failed."""

    def __init__(self, message, stage=None):
        self.stage = stage
        prefix = f"[stage {stage}] " if stage is not None else ""
        super().__init__(prefix + message)


class ParseError(ReskdError, ValueError):
    pass


class IdxMagicError(ParseError):
    pass


class IdxTruncatedError(ParseError):
    pass


class IdxCountMismatchError(ParseError):
    pass


class ConfigError(ReskdError, ValueError):
    """Invalid configuration; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))
