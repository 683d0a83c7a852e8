"""Shared exception types."""


class InputError(ValueError):
    """Caller violated a precondition (bad shape, bad parameter range, ...)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class FormatError(ValueError):
    """A file did not match its declared binary format."""


class ScheduleError(ValueError):
    """A diffusion schedule violates its construction constraints."""


class DefenseError(RuntimeError):
    """A defense filtered every update; caller must fall back."""


class ConfigError(ValueError):
    """An experiment config document failed validation."""
