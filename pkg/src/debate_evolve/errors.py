"""Exception hierarchy shared by every module."""


class DteError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DteError):
    """Invalid or inconsistent configuration (CLI exit code 1)."""


class TransportError(DteError):
    """A remote agent call failed after all retries (CLI exit code 2)."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class TrainingError(DteError):
    """Training produced a non-finite gradient or the external trainer failed."""


class DivergenceError(DteError, ValueError):
    """KL divergence is infinite (q has zero mass where p does not)."""


class DataFormatError(ConfigurationError, ValueError):
    """A data file (JSON Lines, manifest) is malformed; the message names the line."""
