"""Clipped surrogate objectives: MARPO (per-sample + reflective pair term) and MAPPO.

Surrogate terms are reported in maximization sign; ``total`` is the
minimized quantity ``-(l0 + alpha * l1 + sigma * entropy) + value_coef * value_loss``.

Every piecewise choice (``min`` of the two branches, ``clip``) takes the
derivative of the active branch. Ties go to the unclipped branch, and a
ratio sitting exactly on a bound counts as unclipped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .approximator import HeadResult, ParamSet, gradient, log_softmax
from .errors import ValidationError
from .kl_clip import ClipBounds
from .rollout import Minibatch

LOG_RATIO_CLAMP = 30.0

A_SEL_NEXT = "next"
A_SEL_LITERAL = "literal"


@dataclass
class LossBreakdown:
    l0: float
    l1: float
    entropy: float
    value_loss: float
    total: float
    measured_kl: float = 0.0
    clip_fraction: float = 0.0
    mean_ratio: float = 1.0
    clamped: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def ratio(new_log_prob, old_log_prob):
    """``exp(new - old)`` with the log-difference clamped to +-30."""
    diff = np.clip(np.asarray(new_log_prob, dtype=np.float64) - old_log_prob, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    r = np.exp(diff)
    return float(r) if r.ndim == 0 else r


def _ratio_and_slope(new_lp: np.ndarray, old_lp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    diff = new_lp - old_lp
    clamped = np.abs(diff) > LOG_RATIO_CLAMP
    r = np.exp(np.clip(diff, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    # d ratio / d new_log_prob; zero on the flat part of the clamp
    slope = np.where(clamped, 0.0, r)
    return r, slope, clamped


def _clip(r: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Clipped value and its derivative (1 inside or on the bounds, else 0)."""
    c = np.minimum(np.maximum(r, lo), hi)
    inside = (r >= lo) & (r <= hi)
    return c, inside.astype(np.float64)


def _clip_term(r: np.ndarray, adv: np.ndarray, lo: float, hi: float):
    """Per-sample ``min(r*A, clip(r)*A)`` and d/dr."""
    c, dc = _clip(r, lo, hi)
    unclipped = r * adv
    clipped = c * adv
    use_unclipped = unclipped <= clipped
    value = np.where(use_unclipped, unclipped, clipped)
    d_r = np.where(use_unclipped, adv, dc * adv)
    return value, d_r


def l0_clip(ratios, advantages, bounds: ClipBounds) -> float:
    """Mean over samples of ``min(rho * A, clip(rho, lower, upper) * A)``."""
    r = np.atleast_1d(np.asarray(ratios, dtype=np.float64))
    a = np.atleast_1d(np.asarray(advantages, dtype=np.float64))
    if r.shape != a.shape or r.size == 0:
        raise ValidationError("ratios and advantages must be equal-length and non-empty")
    value, _ = _clip_term(r, a, bounds.lower, bounds.upper)
    return float(value.mean())


def _reflective_terms(r_k, r_next, adv_sel, adv_next, bounds: ClipBounds, bounds_next: ClipBounds):
    """Per-pair reflective value and derivatives with respect to both ratios."""
    c_k, dc_k = _clip(r_k, bounds.lower, bounds.upper)
    c_n, dc_n = _clip(r_next, bounds_next.lower, bounds_next.upper)
    unclipped = r_k * r_next * adv_sel
    clipped = c_k * c_n * adv_next
    use_unclipped = unclipped <= clipped
    value = np.where(use_unclipped, unclipped, clipped)
    d_rk = np.where(use_unclipped, r_next * adv_sel, dc_k * c_n * adv_next)
    d_rn = np.where(use_unclipped, r_k * adv_sel, c_k * dc_n * adv_next)
    return value, d_rk, d_rn


def l1_clip(
    ratios_k,
    ratios_next,
    next_advantages,
    bounds: ClipBounds,
    bounds_next: Optional[ClipBounds] = None,
    advantages_k=None,
) -> float:
    """Mean over pairs of ``min(rho_k * rho_k1 * A_sel, c(rho_k, rho_k1) * A_k1)``.

    ``A_sel`` is the next-step advantage unless ``advantages_k`` is given,
    in which case the unclipped branch uses the step-k advantage. An empty
    pair list gives 0.
    """
    r_k = np.atleast_1d(np.asarray(ratios_k, dtype=np.float64))
    r_n = np.atleast_1d(np.asarray(ratios_next, dtype=np.float64))
    a_n = np.atleast_1d(np.asarray(next_advantages, dtype=np.float64))
    if not r_k.shape == r_n.shape == a_n.shape:
        raise ValidationError("pair arrays must have equal length")
    if r_k.size == 0:
        return 0.0
    a_sel = a_n if advantages_k is None else np.atleast_1d(np.asarray(advantages_k, dtype=np.float64))
    value, _, _ = _reflective_terms(r_k, r_n, a_sel, a_n, bounds, bounds_next or bounds)
    return float(value.mean())


def value_loss(predictions, returns) -> float:
    """Mean squared error between critic outputs and GAE returns."""
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    if p.shape != r.shape:
        raise ValidationError("predictions and returns differ in shape")
    return float(np.mean((p - r) ** 2)) if p.size else 0.0


# ---------------------------------------------------------------------------
# Full objectives on a minibatch
# ---------------------------------------------------------------------------


def _entropy_and_grad(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.exp(logp)
    h = -np.sum(p * logp, axis=1)
    # dH/dz_a = -p_a (log p_a + H)
    dh = -p * (logp + h[:, None])
    return h, dh


class _Objective:
    """Shared machinery for MARPO and MAPPO heads.

    Rows ``[0, B)`` of the policy input are the minibatch samples and rows
    ``[B, B + P)`` are the successor observations of the P pairs.
    """

    def __init__(
        self,
        mb: Minibatch,
        bounds: ClipBounds,
        bounds_next: Optional[ClipBounds],
        alpha: float,
        sigma: float,
        value_coef: float,
        a_sel: str,
    ) -> None:
        if len(mb) == 0:
            raise ValidationError("empty minibatch")
        if alpha < 0.0:
            raise ValidationError(f"alpha must be >= 0, got {alpha}")
        if a_sel not in (A_SEL_NEXT, A_SEL_LITERAL):
            raise ValidationError(f"unknown advantage selection {a_sel!r}")
        self.mb = mb
        self.bounds = bounds
        self.bounds_next = bounds_next or bounds
        self.alpha = alpha
        self.sigma = sigma
        self.value_coef = value_coef
        self.a_sel = a_sel
        # alpha == 0 switches the reflective term off entirely (reported as 0)
        self.reflective = alpha > 0.0 and mb.n_pairs > 0

    def __call__(self, logits: np.ndarray, values: np.ndarray, flat: np.ndarray) -> HeadResult:
        mb = self.mb
        B = len(mb)
        logp_all = log_softmax(logits)
        logp = logp_all[:B]
        rows = np.arange(B)
        new_lp = logp[rows, mb.actions]
        r, slope, clamped = _ratio_and_slope(new_lp, mb.old_log_probs)

        term0, d_r0 = _clip_term(r, mb.advantages, self.bounds.lower, self.bounds.upper)
        l0 = float(term0.mean())
        d_lp = d_r0 * slope / B

        l1 = 0.0
        d_lp_next = None
        if self.reflective:
            P = mb.n_pairs
            lp_next_all = logp_all[B : B + P]
            lp_next = lp_next_all[np.arange(P), mb.next_actions]
            r_n, slope_n, _ = _ratio_and_slope(lp_next, mb.next_old_log_probs)
            r_k = r[mb.pair_rows]
            a_sel = mb.next_advantages if self.a_sel == A_SEL_NEXT else mb.pair_advantages
            term1, d_rk, d_rn = _reflective_terms(r_k, r_n, a_sel, mb.next_advantages, self.bounds, self.bounds_next)
            l1 = float(term1.mean())
            scale = self.alpha / P
            np.add.at(d_lp, mb.pair_rows, scale * d_rk * slope[mb.pair_rows])
            d_lp_next = scale * d_rn * slope_n

        ent, d_ent = _entropy_and_grad(logp)
        entropy = float(ent.mean())

        # maximized objective J; gradient below is for -J
        dJ = np.zeros_like(logits)
        onehot = np.zeros_like(logp)
        onehot[rows, mb.actions] = 1.0
        probs = np.exp(logp)
        # d logp[a] / d z = onehot - p
        dJ[:B] = d_lp[:, None] * (onehot - probs) + (self.sigma / B) * d_ent
        if d_lp_next is not None:
            P = mb.n_pairs
            p_next = np.exp(logp_all[B : B + P])
            oh_next = np.zeros_like(p_next)
            oh_next[np.arange(P), mb.next_actions] = 1.0
            dJ[B : B + P] = d_lp_next[:, None] * (oh_next - p_next)

        vl = value_loss(values, mb.returns)
        dv = self.value_coef * 2.0 * (values - mb.returns) / B

        total = -(l0 + self.alpha * l1 + self.sigma * entropy) + self.value_coef * vl
        c, _ = _clip(r, self.bounds.lower, self.bounds.upper)
        breakdown = LossBreakdown(
            l0=l0,
            l1=l1,
            entropy=entropy,
            value_loss=vl,
            total=total,
            clip_fraction=float(np.mean(c != r)),
            mean_ratio=float(r.mean()),
            clamped=int(clamped.sum()),
        )
        return HeadResult(total, dlogits=-dJ, dvalues=dv, extras={"breakdown": breakdown})


def _run(params: ParamSet, obj: _Objective, with_grad: bool):
    obs = np.concatenate([obj.mb.obs, obj.mb.next_obs]) if obj.reflective else obj.mb.obs
    res, grad = gradient(params, obs, obj.mb.states, obj)
    breakdown = res.extras["breakdown"]
    return (breakdown, grad) if with_grad else breakdown


def marpo_loss(
    params: ParamSet,
    mb: Minibatch,
    bounds: ClipBounds,
    bounds_next: Optional[ClipBounds] = None,
    alpha: float = 0.5,
    sigma: float = 0.01,
    value_coef: float = 0.5,
    a_sel: str = A_SEL_NEXT,
    with_grad: bool = False,
):
    """MARPO objective on a minibatch; returns a LossBreakdown (and flat gradient of ``total``)."""
    obj = _Objective(mb, bounds, bounds_next, alpha, sigma, value_coef, a_sel)
    return _run(params, obj, with_grad)


def mappo_loss(
    params: ParamSet,
    mb: Minibatch,
    epsilon: float = 0.2,
    sigma: float = 0.01,
    value_coef: float = 0.5,
    with_grad: bool = False,
):
    """MAPPO objective: fixed symmetric clip ``1 +- epsilon``, no reflective term."""
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must be in (0, 1), got {epsilon}")
    obj = _Objective(mb, ClipBounds.symmetric(epsilon), None, 0.0, sigma, value_coef, A_SEL_NEXT)
    return _run(params, obj, with_grad)
