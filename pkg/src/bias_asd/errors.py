"""Exception types shared across the package."""


class BiasError(Exception):
    """Base class for all package errors."""


class ValidationError(BiasError, ValueError):
    """Input violates a documented invariant (bad box, bad config value...)."""


class ParseError(BiasError, ValueError):
    """A text input (manifest, config, prediction dump) could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(BiasError, ValueError):
    """Model or training configuration is inconsistent."""


class TrainingError(BiasError, RuntimeError):
    """Raised when optimisation diverges (non-finite loss)."""
