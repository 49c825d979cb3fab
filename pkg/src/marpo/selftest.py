"""Fast property checks behind ``marpo selftest``.

Each check returns ``(name, passed, detail)``. The whole suite runs in a
few seconds.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .approximator import ParamSet, finite_difference, init_params, policy_forward, relative_error
from .kl_clip import ClipBounds, KlControllerState, ema_update, f_estimator, kl_discrete, solve_bounds
from .losses import mappo_loss, marpo_loss
from .rollout import Minibatch, gae_arrays

Check = tuple[str, bool, str]


def random_pmf(rng: np.random.Generator, k: int) -> np.ndarray:
    p = rng.dirichlet(np.full(k, 0.5))
    p = np.maximum(p, 1e-12)
    return p / p.sum()


def random_minibatch(
    rng: np.random.Generator,
    params: ParamSet,
    batch: int = 16,
    pairs: int = 6,
    noise: float = 0.3,
    avoid: tuple[float, ...] = (),
    margin: float = 1e-3,
) -> Minibatch:
    """Random inputs with old log-probs perturbed around the current policy.

    Ratios are resampled until none lies within ``margin`` of a value in
    ``avoid`` (the clip bounds), so the loss is smooth around the draw.
    """
    od, sd, A = params.obs_dim, params.state_dim, params.n_actions
    obs = rng.normal(size=(batch, od))
    states = rng.normal(size=(batch, sd))
    actions = rng.integers(0, A, batch)
    next_obs = rng.normal(size=(pairs, od))
    next_actions = rng.integers(0, A, pairs)
    probs = policy_forward(params, obs)
    lp = np.log(probs[np.arange(batch), actions])
    nlp = np.log(policy_forward(params, next_obs)[np.arange(pairs), next_actions])
    while True:
        d0 = rng.normal(0.0, noise, batch)
        d1 = rng.normal(0.0, noise, pairs)
        r = np.exp(np.concatenate([d0, d1]))
        if all(np.min(np.abs(r - a)) > margin for a in avoid):
            break
    return Minibatch(
        obs=obs,
        states=states,
        actions=actions,
        old_log_probs=lp - d0,
        old_probs=probs,
        advantages=rng.normal(size=batch),
        returns=rng.normal(size=batch),
        pair_rows=np.sort(rng.choice(batch, size=pairs, replace=False)),
        next_obs=next_obs,
        next_actions=next_actions,
        next_old_log_probs=nlp - d1,
        next_advantages=rng.normal(size=pairs),
    )


def check_unbiasedness(n: int = 1000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(2, 17))
        p_old, p_new = random_pmf(rng, k), random_pmf(rng, k)
        est = float(np.sum(p_old * f_estimator(p_new / p_old)))
        worst = max(worst, abs(est - kl_discrete(p_old, p_new)))
    return "estimator unbiasedness", worst <= 1e-12, f"max |E f - KL| = {worst:.2e}"


def check_f_shape(n: int = 10_000, seed: int = 1) -> Check:
    rng = np.random.default_rng(seed)
    x = np.exp(rng.uniform(np.log(1e-6), np.log(1e3), n))
    fx = f_estimator(x)
    nonneg = bool(np.all(fx >= 0.0)) and f_estimator(1.0) == 0.0 and bool(np.all(fx[x != 1.0] > 0.0))
    a = np.exp(rng.uniform(np.log(1e-3), np.log(1e2), n))
    b = np.exp(rng.uniform(np.log(1e-3), np.log(1e2), n))
    t = rng.uniform(0.0, 1.0, n)
    lhs = f_estimator(t * a + (1 - t) * b)
    rhs = t * f_estimator(a) + (1 - t) * f_estimator(b)
    convex = bool(np.all(lhs <= rhs + 1e-12 * np.maximum(1.0, np.abs(rhs))))
    return "f non-negative and convex", nonneg and convex, f"nonneg={nonneg} convex={convex}"


def check_roots(n: int = 1000, seed: int = 2) -> Check:
    rng = np.random.default_rng(seed)
    targets = np.sort(rng.uniform(1e-8, 2.0, n))
    worst, ok = 0.0, True
    prev = None
    for d in targets:
        b = solve_bounds(d)
        worst = max(worst, abs(f_estimator(b.lower) - d), abs(f_estimator(b.upper) - d))
        ok &= b.lower < 1.0 < b.upper and (1.0 - b.lower) < (b.upper - 1.0)
        if prev is not None:
            ok &= b.lower < prev.lower and b.upper > prev.upper
        prev = b
    return "root residuals and asymmetry", bool(ok and worst <= 1e-10), f"max residual {worst:.2e}"


def check_ema(n: int = 10_000, seed: int = 3) -> Check:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n // 100):
        state = KlControllerState.initial(float(rng.uniform(0, 0.999)), float(rng.uniform(0, 0.2)))
        for m in rng.exponential(0.05, 100):
            expect = max(state.kl_bias, state.beta * state.target_kl + (1 - state.beta) * m)
            state = ema_update(state, float(m))
            ok &= state.target_kl == expect and state.target_kl >= state.kl_bias
    return "EMA controller floor", bool(ok), ""


def check_gradients(n: int = 5, seed: int = 4, perturb: float = 0.0) -> Check:
    worst = 0.0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        params = init_params(5, 4, 3, hidden=(12, 12), seed=i)
        params = params.with_flat(rng.normal(0.0, 0.5, params.size))
        target = float(rng.uniform(0.01, 0.1))
        bounds = solve_bounds(target)
        mb = random_minibatch(rng, params, avoid=bounds.as_tuple())
        _, grad = marpo_loss(params, mb, bounds, alpha=0.5, sigma=0.01, with_grad=True)
        if perturb:
            grad = grad + perturb * np.random.default_rng(i).standard_normal(grad.size)

        def total(flat: np.ndarray) -> float:
            return marpo_loss(params.with_flat(flat), mb, bounds, alpha=0.5, sigma=0.01).total

        numeric = finite_difference(total, params.flat(), h=1e-5)
        worst = max(worst, float(relative_error(grad, numeric).max()))
    return "gradient check", worst <= 1e-5, f"max relative error {worst:.2e}"


def check_reduction(n: int = 20, seed: int = 5) -> Check:
    worst = 0.0
    sym = ClipBounds.symmetric(0.2)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        params = init_params(5, 4, 3, hidden=(8, 8), seed=i)
        params = params.with_flat(rng.normal(0.0, 0.5, params.size))
        mb = random_minibatch(rng, params)
        a = marpo_loss(params, mb, sym, alpha=0.0, sigma=0.01).total
        b = mappo_loss(params, mb, epsilon=0.2, sigma=0.01).total
        worst = max(worst, abs(a - b))
    return "MAPPO reduction", worst <= 1e-12, f"max |diff| {worst:.2e}"


def check_gae(n: int = 100, seed: int = 6) -> Check:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n):
        T = int(rng.integers(1, 30))
        r = rng.normal(size=T)
        dones = np.zeros(T, dtype=bool)
        dones[-1] = True
        gamma = float(rng.uniform(0.5, 1.0))
        adv, _ = gae_arrays(r, np.zeros(T), dones, gamma, 1.0)
        mc = np.array([sum(gamma**j * r[t + j] for j in range(T - t)) for t in range(T)])
        ok &= bool(np.allclose(adv, mc, rtol=0, atol=1e-12))
    adv, _ = gae_arrays([0.0, 1.0], [0.0, 0.0], [False, True], 0.9, 0.95)
    ok &= abs(adv[0] - 0.855) <= 1e-12
    return "GAE oracle", bool(ok), ""


CHECKS: list[Callable[..., Check]] = [
    check_unbiasedness,
    check_f_shape,
    check_roots,
    check_ema,
    check_gradients,
    check_reduction,
    check_gae,
]


def run_all(perturb_gradient: float = 0.0) -> list[tuple[str, bool, str, float]]:
    results = []
    for check in CHECKS:
        t0 = time.perf_counter()
        if check is check_gradients:
            name, ok, detail = check(perturb=perturb_gradient)
        else:
            name, ok, detail = check()
        results.append((name, ok, detail, time.perf_counter() - t0))
    return results
