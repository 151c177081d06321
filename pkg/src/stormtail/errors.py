"""Exception types shared across the package.

Error kinds are deliberately distinct so callers (and the CLI exit-code
mapping) can tell configuration mistakes, bad data, and runtime failures
apart.
"""


class StormtailError(Exception):
    """Base class for all package errors."""


class ValidationError(StormtailError):
    """Invalid values in grids, stacks, or derived fields."""


class ConfigError(StormtailError):
    """Invalid or inconsistent configuration."""


class DataError(StormtailError):
    """Dataset construction or splitting failed."""


class ContainerError(StormtailError):
    """Base class for binary-container I/O failures."""


class BadMagicError(ContainerError):
    """File does not start with the container magic bytes."""


class HeaderError(ContainerError):
    """Container header is not valid JSON or violates the schema."""


class PayloadSizeMismatchError(ContainerError):
    """Declared array shapes disagree with the payload byte count."""


class TrainingDivergedError(StormtailError):
    """Loss became non-finite during training; carries a diagnostic snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
