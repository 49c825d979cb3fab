"""KL-derived asymmetric clipping bounds.

The clipping interval ``[lower, upper]`` is the pair of roots of

    f(x) = x - 1 - ln(x) = d

where ``d`` is a smoothed KL target. ``f`` is the per-sample estimator whose
expectation under the old policy equals KL(old || new) when ``x`` is the
importance ratio, so the interval bounds how far a single ratio may move for a
given KL budget. Because ``f`` is steeper left of 1 than right of it, the
interval is always wider above 1 than below.

All divergences are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DivergenceError, DomainError, ValidationError

NORMALIZATION_TOL = 1e-9
ROOT_TOL = 1e-10
_LOWER_START = 10.0 * float(np.finfo(float).eps)
_TINY = float(np.finfo(float).tiny)


@dataclass(frozen=True)
class ClipBounds:
    lower: float
    upper: float

    def __post_init__(self) -> None:
        if not (0.0 < self.lower <= 1.0 <= self.upper and math.isfinite(self.upper)):
            raise ValidationError(f"invalid clip bounds ({self.lower}, {self.upper})")

    @classmethod
    def symmetric(cls, epsilon: float) -> "ClipBounds":
        """PPO-style fixed interval ``(1 - epsilon, 1 + epsilon)``."""
        if not 0.0 < epsilon < 1.0:
            raise ValidationError(f"epsilon must be in (0, 1), got {epsilon}")
        return cls(1.0 - epsilon, 1.0 + epsilon)

    def as_tuple(self) -> tuple[float, float]:
        return (self.lower, self.upper)


@dataclass(frozen=True)
class KlControllerState:
    """EMA-tracked KL target, floored at ``kl_bias``.

    ``beta`` is the retention weight of the previous target. The dataclass is
    frozen, so ``beta`` and ``kl_bias`` cannot change after construction;
    updates return a new state.
    """

    target_kl: float
    beta: float
    kl_bias: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError(f"beta must be in [0, 1), got {self.beta}")
        if not (self.kl_bias >= 0.0 and math.isfinite(self.kl_bias)):
            raise ValidationError(f"kl_bias must be finite and >= 0, got {self.kl_bias}")
        # a target below the floor is allowed; the next update lifts it
        if not (self.target_kl >= 0.0 and math.isfinite(self.target_kl)):
            raise ValidationError(f"target_kl must be finite and >= 0, got {self.target_kl}")

    @classmethod
    def initial(cls, beta: float, kl_bias: float) -> "KlControllerState":
        """Start the target at the floor."""
        return cls(target_kl=kl_bias, beta=beta, kl_bias=kl_bias)


def f_estimator(x):
    """``x - 1 - ln x``; accepts a scalar or an array of positive ratios.

    For ``x`` in [0.5, 2] the subtraction ``x - 1`` is exact, and ``log1p``
    keeps the result accurate to a few ulps even when it is ~1e-12.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0.0):
        raise DomainError("f_estimator requires x > 0")
    u = arr - 1.0
    near = (arr >= 0.5) & (arr <= 2.0)
    out = np.where(near, u - np.log1p(np.where(near, u, 0.0)), u - np.log(arr))
    if out.ndim == 0:
        return float(out)
    return out


def _check_pmf(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-D probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise ValidationError(f"{name} sums to {p.sum()!r}, not 1")


def _pair(p: Sequence[float], q: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_pmf(p, "p")
    _check_pmf(q, "q")
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.size} vs {q.size}")
    return p, q


def kl_discrete(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) = sum p ln(p / q), with 0 ln(0 / q) = 0."""
    p, q = _pair(p, q)
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        raise DivergenceError("q has zero mass where p is positive")
    ps, qs = p[support], q[support]
    # rounding can leave -1e-17 for identical inputs
    return max(0.0, float(np.sum(ps * np.log(ps / qs))))


def tv_discrete(p: Sequence[float], q: Sequence[float]) -> float:
    """Total variation distance, ``0.5 * sum |p - q|``. Diagnostic only."""
    p, q = _pair(p, q)
    return float(0.5 * np.sum(np.abs(p - q)))


def measured_kl(old_dists, new_dists) -> float:
    """Mean of KL(old_j || new_j) over paired distributions.

    Accepts lists of probability vectors or 2-D arrays with one row per
    sampled agent-timestep.
    """
    old = np.asarray(old_dists, dtype=float)
    new = np.asarray(new_dists, dtype=float)
    if old.ndim != 2 or old.shape[0] == 0:
        raise ValidationError("measured_kl needs a non-empty batch of distributions")
    if old.shape != new.shape:
        raise ValidationError(f"shape mismatch: {old.shape} vs {new.shape}")
    for arr, name in ((old, "old"), (new, "new")):
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
            raise ValidationError(f"{name} distributions have invalid entries")
        if np.any(np.abs(arr.sum(axis=1) - 1.0) > NORMALIZATION_TOL):
            raise ValidationError(f"{name} distributions are not normalized")
    support = old > 0.0
    if np.any(new[support] <= 0.0):
        raise DivergenceError("new policy has zero mass where old policy is positive")
    safe_old = np.where(support, old, 1.0)
    safe_new = np.where(support, new, 1.0)
    per_row = np.sum(np.where(support, old * np.log(safe_old / safe_new), 0.0), axis=1)
    return float(np.maximum(per_row, 0.0).mean())


def ema_update(state: KlControllerState, measured: float) -> KlControllerState:
    """Blend a new KL measurement into the target, never dropping below the bias."""
    if not (measured >= 0.0 and math.isfinite(measured)):
        raise ValidationError(f"measured KL must be finite and >= 0, got {measured}")
    blended = state.beta * state.target_kl + (1.0 - state.beta) * measured
    return replace(state, target_kl=max(state.kl_bias, blended))


def _f(x: float) -> float:
    # scalar twin of f_estimator for the solver's inner loop
    u = x - 1.0
    if 0.5 <= x <= 2.0:
        return u - math.log1p(u)
    return u - math.log(x)


def _f_prime(x: float) -> float:
    return 1.0 - 1.0 / x


def _bisect(far: float, target: float) -> float:
    """Root of f(x) = target between ``far`` (f > target) and 1 (f = 0).

    Runs until the bracket cannot shrink further, then picks the endpoint
    that is strictly on the ``far`` side of 1 when the endpoint at 1 is
    adjacent, so a positive target never collapses to 1.
    """
    a, b = far, 1.0
    while True:
        mid = 0.5 * (a + b)
        if mid == a or mid == b:
            break
        if _f(mid) > target:
            a = mid
        else:
            b = mid
    if b == 1.0:
        return a
    return a if abs(_f(a) - target) < abs(_f(b) - target) else b


def _polish(x: float, target: float, lo: float, hi: float) -> float:
    best, best_res = x, abs(_f(x) - target)
    for _ in range(3):
        step = (_f(best) - target) / _f_prime(best)
        cand = best - step
        if not lo < cand < hi:
            break
        res = abs(_f(cand) - target)
        if res >= best_res:
            break
        best, best_res = cand, res
    return best


def solve_bounds(target: float) -> ClipBounds:
    """Solve f(x) = target on both sides of 1.

    Returns ``ClipBounds(1, 1)`` for a zero target.
    """
    target = float(target)
    if not (math.isfinite(target) and target >= 0.0):
        raise ValidationError(f"KL target must be finite and >= 0, got {target}")
    if target == 0.0:
        return ClipBounds(1.0, 1.0)

    lo = _LOWER_START
    while _f(lo) <= target:
        lo *= 0.5
        if lo < _TINY:
            raise ValidationError(f"KL target {target} too large to bracket")
    hi = 2.0
    while _f(hi) <= target:
        hi *= 2.0
        if not math.isfinite(hi):
            raise ValidationError(f"KL target {target} too large to bracket")

    lower = _polish(_bisect(lo, target), target, lo, 1.0)
    upper = _polish(_bisect(hi, target), target, 1.0, hi)
    return ClipBounds(lower, upper)
