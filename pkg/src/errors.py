"""
Exception hierarchy for posemesh.

Every exception derives from a built-in base as well, so callers can keep
catching `ValueError` / `ArithmeticError` at the command-line boundary.
"""


class PosemeshError(Exception):
    """Root of all posemesh errors."""


class StructuralError(PosemeshError, ValueError):
    """Expression graph misuse: unbound inputs, shape mismatches, missing forward."""


class NumericalError(PosemeshError, ArithmeticError):
    """A computation produced or received non-finite values."""


class SceneParseError(PosemeshError, ValueError):
    """A scene description file is malformed."""


class SceneValidationError(PosemeshError, ValueError):
    """Scene, config or synthetic-scene parameters are inconsistent."""


class CheckpointError(PosemeshError, ValueError):
    """A checkpoint container cannot be read."""
