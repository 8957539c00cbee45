"""Exception hierarchy shared by every stage of the pipeline."""


class EIILError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(EIILError, ValueError):
    """Input arrays or configuration values were rejected."""


class DegenerateSplitError(EIILError, ValueError):
    """An environment partition has an empty environment."""


class DivergenceError(EIILError, FloatingPointError):
    """Optimization produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class IngestionError(EIILError, OSError):
    """A data file is missing or malformed."""


class ParseError(EIILError, ValueError):
    """A CSV file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(EIILError, ValueError):
    """An experiment configuration is invalid."""


class StageError(EIILError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
