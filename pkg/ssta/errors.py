"""Exception hierarchy shared by every module."""
from typing import Dict, Optional


class SstaError(Exception):
    """Base class for all simulator errors."""


class ShapeMismatchError(SstaError, ValueError):
    """Operand shapes do not line up (no implicit broadcasting)."""


class TapeError(SstaError):
    """Misuse of a gradient tape (non-scalar loss, second backward, foreign value)."""


class NonFiniteError(SstaError):
    """A forward value or an adjoint contains NaN or Inf."""


class ProtocolViolation(SstaError):
    """A message, message set or gradient packet breaks the round contract."""


class RoundAborted(SstaError):
    """A training round was abandoned; `diagnostics` says where and why."""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class WorldConsistencyError(SstaError):
    """The traffic world reached a state its own rules forbid."""


class ConfigError(SstaError, ValueError):
    """Invalid configuration value."""


class CheckpointError(SstaError):
    """A checkpoint is missing, incomplete or does not match the model."""


class OrderingViolation(SstaError):
    """An ablation's expected ordering of arm means did not hold."""

    def __init__(self, message: str, means: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.means = means or {}


class ReplayError(SstaError, ValueError):
    """Invalid replay-buffer operation (negative gradient norm, empty draw)."""
