"""Exception hierarchy shared by every module."""

from __future__ import annotations


class RefuelError(Exception):
    """Base class for all errors raised by this package."""


class InputError(RefuelError, ValueError):
    """Invalid argument, shape mismatch or out-of-range index."""


class NumericalError(RefuelError, ArithmeticError):
    """Non-finite values or a failed factorization."""


class GenerationError(RefuelError):
    """Random construction could not satisfy its constraints within the retry budget."""


class ConstantsError(RefuelError):
    """A family constant is degenerate (e.g. an unreachable state)."""


class MLEError(RefuelError):
    """Every candidate in the model class was eliminated for some task."""


class SchemaError(RefuelError, ValueError):
    """A persisted document is malformed or fails validation."""


class VersionError(SchemaError):
    """A persisted document carries an unsupported schema version."""


class PersistIOError(RefuelError, OSError):
    """Reading or writing a persisted artifact failed at the OS level."""
