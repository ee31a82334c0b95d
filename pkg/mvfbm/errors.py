"""
Exception hierarchy. Domain problems subclass ValueError so plain `except ValueError` still works.
"""
from __future__ import annotations


class MvfbmError(Exception):
    """Root of every error raised by the package."""


class DomainError(MvfbmError, ValueError):
    """Input outside the domain of an operation (negative time, bad alpha, dimension mismatch...)."""


class FactorizationError(DomainError):
    """Covariance stayed non-positive-definite after the jitter schedule."""


class UnsupportedInstanceError(DomainError):
    """Valid input the exact routine does not handle (e.g. W2 with unequal atom counts in n > 1)."""


class BlowUpError(DomainError):
    def __init__(self, step: int, time: float, what: str = "state"):
        self.step = step
        self.time = time
        super().__init__(f"non-finite {what} at step {step} (t={time:.6g})")


class ConfigError(MvfbmError, ValueError):
    """Config file could not be parsed or failed validation."""
