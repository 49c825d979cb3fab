"""Exception types shared across the package."""

from __future__ import annotations


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class DomainError(ValidationError):
    """Argument lies outside the mathematical domain of a function."""


class DivergenceError(ValidationError):
    """KL divergence is infinite (p has mass where q has none)."""


class ProtocolError(RuntimeError):
    """Environment used out of order, e.g. stepped after the episode ended."""


class NonFiniteGradientError(FloatingPointError):
    """Gradient contains NaN or inf; the update must be skipped."""


class TrainingError(RuntimeError):
    """Training cannot continue (repeated aborted iterations)."""
