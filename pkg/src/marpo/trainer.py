"""Outer training loop for MARPO and the MAPPO baseline.

Per iteration: collect a rollout, compute GAE and pair links, then run
``epochs`` passes of seeded minibatches. For every minibatch the true KL
between the stored behaviour distributions and the current policy is
measured, folded into the EMA target, turned into clip bounds, and one
gradient step is taken on the policy and critic together.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .approximator import AdamState, ParamSet, init_params, policy_forward, sgd_step
from .config import TrainConfig, serialize
from .envs import CooperativeEnv, make_env
from .errors import DivergenceError, NonFiniteGradientError, TrainingError, ValidationError
from .kl_clip import ClipBounds, KlControllerState, ema_update, measured_kl, solve_bounds
from .losses import mappo_loss, marpo_loss
from .rollout import build_batch, collect, env_steps, minibatch_indices, sample_actions

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_ABORTS = 3


@dataclass
class MetricsRow:
    iteration: int
    env_steps: int
    mean_return: float
    win_rate: float
    measured_kl: float
    target_kl: float
    bound_lower: float
    bound_upper: float
    clip_fraction: float
    l0: float
    l1: float
    entropy: float
    value_loss: float
    wall_time_s: float


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class RunReport:
    config: TrainConfig
    run_id: str
    rows: list[MetricsRow]
    final_win_rate: float
    final_mean_return: float
    wall_time_s: float
    params: ParamSet
    aborted_iterations: list[int] = field(default_factory=list)
    skipped_updates: int = 0


def run_id(config: TrainConfig) -> str:
    """Short content hash of the serialized config."""
    return hashlib.sha1(serialize(config).encode()).hexdigest()[:12]


def evaluate(
    params: ParamSet,
    env: CooperativeEnv,
    episodes: int,
    seed: int,
    greedy: bool = True,
) -> tuple[float, float]:
    """Win rate and mean undiscounted return over ``episodes`` rollouts.

    Greedy mode takes the argmax action (lowest index on ties); otherwise
    actions are sampled from a stream keyed by ``(seed, episode)``.
    """
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    wins, total = 0, 0.0
    for e in range(episodes):
        rng = np.random.default_rng([seed, e])
        obs, _ = env.reset(int(rng.integers(2**31)))
        while True:
            probs = policy_forward(params, obs)
            if greedy:
                actions = probs.argmax(axis=1)
            else:
                actions = sample_actions(probs, rng.random(probs.shape[0]))
            res = env.step(actions)
            obs = res.observations
            if res.done:
                wins += bool(res.info.get("win", False))
                total += res.info["episode_return"]
                break
    return wins / episodes, total / episodes


def exact_evaluation(
    params: ParamSet,
    env: CooperativeEnv,
    seed: int = 0,
    max_leaves: int = 100_000,
) -> tuple[float, float]:
    """Win probability and expected return of the stochastic policy, by enumeration.

    Walks every joint-action sequence from ``env.reset(seed)``; only usable
    for deterministic games whose joint-action tree has at most
    ``max_leaves`` leaves.
    """
    spec = env.spec()
    leaves = float(spec.action_count) ** (spec.n_agents * spec.max_steps)
    if leaves > max_leaves:
        raise ValidationError(f"joint-action tree has {leaves:.3g} leaves (limit {max_leaves})")
    root = copy.deepcopy(env)
    obs, _ = root.reset(seed)

    def walk(node: CooperativeEnv, obs: np.ndarray) -> tuple[float, float]:
        probs = policy_forward(params, obs)
        win = ret = 0.0
        for joint in itertools.product(range(spec.action_count), repeat=spec.n_agents):
            p = float(np.prod(probs[np.arange(spec.n_agents), joint]))
            if p == 0.0:
                continue
            child = copy.deepcopy(node)
            res = child.step(joint)
            if res.done:
                w, r = float(bool(res.info.get("win", False))), res.reward
            else:
                w, r = walk(child, res.observations)
                r += res.reward
            win += p * w
            ret += p * r
        return win, ret

    return walk(root, obs)


def _bounds(config: TrainConfig, target: float) -> tuple[ClipBounds, ClipBounds]:
    """Bounds actually applied in the update (MAPPO always uses the fixed interval)."""
    if config.algorithm == "mappo" or config.clip_mode == "fixed":
        b = ClipBounds.symmetric(config.baseline_epsilon)
        return b, b
    b = solve_bounds(target)
    if config.next_target_scale == 1.0:
        return b, b
    return b, solve_bounds(target * config.next_target_scale)


def _nan_row(iteration: int, steps: int, wall: float) -> MetricsRow:
    nan = float("nan")
    return MetricsRow(iteration, steps, *([nan] * 11), wall)


Callback = Callable[[int, ParamSet, MetricsRow], Optional[bool]]


def train(config: TrainConfig, callback: Optional[Callback] = None) -> RunReport:
    """Run ``config.iterations`` iterations.

    ``callback(iteration, params, row)`` is called after every iteration;
    returning True stops the run early.
    """
    config.validate()
    started = time.perf_counter()
    env = make_env(config.env_name)
    eval_env = make_env(config.env_name)
    spec = env.spec()
    hidden = (config.hidden_size, config.hidden_size)
    params = init_params(spec.obs_dim, spec.state_dim, spec.action_count, hidden, seed=config.seed)
    opt = AdamState.zeros(params.size) if config.optimizer == "adam" else None
    controller = KlControllerState.initial(config.beta, config.kl_bias)

    rows: list[MetricsRow] = []
    aborted: list[int] = []
    skipped = 0
    consecutive = 0
    total_steps = 0
    win_rate = mean_return = float("nan")

    for it in range(1, config.iterations + 1):
        trajs = collect(env, params, config.rollout_steps, seed=[config.seed, 1, it], n_envs=config.n_envs)
        total_steps += env_steps(trajs)
        batch = build_batch(trajs, config.gamma, config.gae_lambda, config.normalize_advantages)

        snapshot = (params, opt, controller)
        acc: dict[str, list[float]] = {k: [] for k in ("measured_kl", "clip_fraction", "l0", "l1", "entropy", "value_loss")}
        bounds = ClipBounds(1.0, 1.0)
        ok = True
        for epoch in range(1, config.epochs + 1):
            for idx in minibatch_indices(len(batch), config.minibatch_size, [config.seed, 2, it, epoch]):
                mb = batch.minibatch(idx)
                try:
                    kl = measured_kl(mb.old_probs, policy_forward(params, mb.obs))
                except DivergenceError:
                    kl = math.inf
                if not math.isfinite(kl):
                    ok = False
                    break
                controller = ema_update(controller, kl)
                bounds, bounds_next = _bounds(config, controller.target_kl)
                if config.algorithm == "marpo":
                    br, grad = marpo_loss(
                        params, mb, bounds, bounds_next, config.alpha, config.sigma, config.value_coef,
                        config.a_sel, with_grad=True,
                    )
                else:
                    br, grad = mappo_loss(
                        params, mb, config.baseline_epsilon, config.sigma, config.value_coef, with_grad=True
                    )
                if not math.isfinite(br.total):
                    ok = False
                    break
                try:
                    params, opt = sgd_step(params, grad, config.learning_rate, opt)
                except NonFiniteGradientError:
                    skipped += 1
                    continue
                acc["measured_kl"].append(kl)
                for key in ("clip_fraction", "l0", "l1", "entropy", "value_loss"):
                    acc[key].append(getattr(br, key))
            if not ok:
                break

        wall = time.perf_counter() - started
        if not ok:
            params, opt, controller = snapshot
            aborted.append(it)
            consecutive += 1
            log.warning("iteration %d aborted: non-finite loss or KL", it)
            row = _nan_row(it, total_steps, wall)
            rows.append(row)
            if consecutive >= MAX_CONSECUTIVE_ABORTS:
                raise TrainingError(f"{consecutive} consecutive aborted iterations (last: {it})")
            if callback is not None:
                callback(it, params, row)
            continue
        consecutive = 0

        if it == 1 or it % config.eval_interval == 0 or it == config.iterations:
            win_rate, mean_return = evaluate(params, eval_env, config.eval_episodes, seed=config.seed + 7919 * it)

        def mean(key: str) -> float:
            return float(np.mean(acc[key])) if acc[key] else float("nan")

        row = MetricsRow(
            iteration=it,
            env_steps=total_steps,
            mean_return=mean_return,
            win_rate=win_rate,
            measured_kl=mean("measured_kl"),
            target_kl=controller.target_kl,
            bound_lower=bounds.lower,
            bound_upper=bounds.upper,
            clip_fraction=mean("clip_fraction"),
            l0=mean("l0"),
            l1=mean("l1"),
            entropy=mean("entropy"),
            value_loss=mean("value_loss"),
            wall_time_s=wall,
        )
        rows.append(row)
        log.info("iter %d steps %d return %.3f win %.3f kl %.4f", it, total_steps, mean_return, win_rate, row.measured_kl)
        if callback is not None and callback(it, params, row):
            break

    final_win, final_return = evaluate(params, eval_env, config.eval_episodes, seed=config.seed + 104729)
    return RunReport(
        config=config,
        run_id=run_id(config),
        rows=rows,
        final_win_rate=final_win,
        final_mean_return=final_return,
        wall_time_s=time.perf_counter() - started,
        params=params,
        aborted_iterations=aborted,
        skipped_updates=skipped,
    )


def row_dict(row: MetricsRow) -> dict:
    return asdict(row)
