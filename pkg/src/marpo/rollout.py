"""On-policy data collection and advantage estimation.

Collection runs several environment copies in lockstep so the policy is
evaluated once per step for all of them. Each episode draws from its own
random stream keyed by ``(seed, episode index)``, and the final dataset is
the shortest prefix of episodes (in index order) that reaches the step
budget. The result is therefore independent of how many copies ran.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .approximator import ParamSet, policy_forward, value_forward
from .envs import CooperativeEnv
from .errors import ValidationError


@dataclass
class Transition:
    agent_id: int
    step_index: int
    obs: np.ndarray
    action: int
    old_log_prob: float
    old_distribution: np.ndarray
    reward: float
    value_estimate: float
    done: bool
    global_state: np.ndarray
    episode_id: int = 0


@dataclass
class Trajectory:
    """One agent's transitions through one episode.

    ``bootstrap_value`` is the critic value after the last step; it is 0
    when the episode terminated.
    """

    agent_id: int
    episode_id: int
    transitions: list[Transition]
    bootstrap_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episode_return: float = 0.0
    win: bool = False

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        return np.array([t.value_estimate for t in self.transitions], dtype=np.float64)

    @property
    def dones(self) -> np.ndarray:
        return np.array([t.done for t in self.transitions], dtype=bool)


@dataclass
class ReflectivePair:
    first: Transition
    second: Transition
    advantage: float
    next_advantage: float


def sample_actions(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one uniform per row."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < uniforms[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class _Episode:
    index: int
    rng: np.random.Generator
    env: CooperativeEnv
    obs: np.ndarray
    state: np.ndarray
    records: list[list[Transition]]
    length: int = 0
    episode_return: float = 0.0
    win: bool = False


def collect(
    env: CooperativeEnv,
    params: ParamSet,
    n_steps: int,
    seed,
    n_envs: int = 8,
) -> list[Trajectory]:
    """Gather complete episodes until at least ``n_steps`` environment steps.

    Returns one trajectory per agent per episode, ordered by episode then
    agent. Each trajectory carries its episode's undiscounted return and
    win flag. ``seed`` is an int or a sequence of ints.
    """
    spec = env.spec()
    if n_steps < spec.max_steps:
        raise ValidationError(f"n_steps ({n_steps}) must be >= max_steps ({spec.max_steps})")
    if n_envs < 1:
        raise ValidationError("n_envs must be >= 1")

    key = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    pool = [env] + [copy.deepcopy(env) for _ in range(n_envs - 1)]
    finished: dict[int, _Episode] = {}
    running: list[Optional[_Episode]] = [None] * n_envs
    next_index = 0
    steps_taken = 0

    def start(slot: int) -> None:
        nonlocal next_index
        rng = np.random.default_rng([*key, next_index])
        e = pool[slot]
        obs, state = e.reset(int(rng.integers(2**31)))
        running[slot] = _Episode(next_index, rng, e, obs, state, [[] for _ in range(spec.n_agents)])
        next_index += 1

    for slot in range(n_envs):
        start(slot)

    while any(ep is not None for ep in running):
        live = [ep for ep in running if ep is not None]
        obs = np.concatenate([ep.obs for ep in live])
        probs = policy_forward(params, obs)
        values = value_forward(params, np.stack([ep.state for ep in live]))
        n = spec.n_agents
        for j, ep in enumerate(live):
            p = probs[j * n : (j + 1) * n]
            actions = sample_actions(p, ep.rng.random(n))
            res = ep.env.step(actions)
            for i in range(n):
                ep.records[i].append(
                    Transition(
                        agent_id=i,
                        step_index=ep.length,
                        obs=ep.obs[i],
                        action=int(actions[i]),
                        old_log_prob=float(np.log(p[i, actions[i]])),
                        old_distribution=p[i].copy(),
                        reward=res.reward,
                        value_estimate=float(values[j]),
                        done=res.done,
                        global_state=ep.state,
                        episode_id=ep.index,
                    )
                )
            ep.length += 1
            ep.episode_return += res.reward
            ep.obs, ep.state = res.observations, res.global_state
            steps_taken += 1
            if res.done:
                ep.win = bool(res.info.get("win", False))
                finished[ep.index] = ep
                slot = running.index(ep)
                running[slot] = None
                if steps_taken < n_steps:
                    start(slot)

    trajectories: list[Trajectory] = []
    total = 0
    for k in range(len(finished)):
        ep = finished[k]
        for i in range(spec.n_agents):
            trajectories.append(
                Trajectory(i, ep.index, ep.records[i], 0.0, episode_return=ep.episode_return, win=ep.win)
            )
        total += ep.length
        if total >= n_steps:
            break
    return trajectories


def episode_stats(trajectories: Sequence[Trajectory]) -> list[tuple[float, bool]]:
    """(undiscounted return, win) per episode in a collected dataset."""
    return [(t.episode_return, t.win) for t in trajectories if t.agent_id == 0]


def env_steps(trajectories: Sequence[Trajectory]) -> int:
    """Number of environment steps: agent 0's transitions across episodes."""
    return sum(len(t) for t in trajectories if t.agent_id == 0)


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


def gae_arrays(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    last_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"gamma must be in [0, 1], got {gamma}")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must be in [0, 1], got {lam}")
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    T = rewards.size
    adv = np.zeros(T)
    running = 0.0
    next_value = last_value
    for t in reversed(range(T)):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def gae(trajectory: Trajectory, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns for one trajectory.

    Terminal steps bootstrap with 0; a trajectory cut before termination
    bootstraps with its ``bootstrap_value``.
    """
    return gae_arrays(
        trajectory.rewards, trajectory.values, trajectory.dones, gamma, lam, trajectory.bootstrap_value
    )


def compute_advantages(trajectories: Sequence[Trajectory], gamma: float, lam: float) -> None:
    for traj in trajectories:
        traj.advantages, traj.returns = gae(traj, gamma, lam)


def pair_consecutive(trajectories: Sequence[Trajectory]) -> list[ReflectivePair]:
    """(k, k+1) pairs within each trajectory; a done step never starts a pair."""
    pairs = []
    for traj in trajectories:
        if traj.advantages is None:
            raise ValidationError("compute advantages before pairing")
        tr = traj.transitions
        for k in range(len(tr) - 1):
            if tr[k].done:
                continue
            pairs.append(ReflectivePair(tr[k], tr[k + 1], float(traj.advantages[k]), float(traj.advantages[k + 1])))
    return pairs


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class Minibatch:
    """Rows for the per-sample terms plus the successor rows of any pairs.

    ``pair_rows`` indexes the step-k rows inside this minibatch; the
    ``next_*`` arrays hold the matching step-(k+1) data, whose records may
    live in other minibatches.
    """

    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    old_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    pair_rows: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray
    next_old_log_probs: np.ndarray
    next_advantages: np.ndarray

    def __len__(self) -> int:
        return self.actions.size

    @property
    def n_pairs(self) -> int:
        return self.pair_rows.size

    @property
    def pair_advantages(self) -> np.ndarray:
        """Step-k advantage of each pair."""
        return self.advantages[self.pair_rows]


@dataclass
class AdvantageBatch:
    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    old_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    agent_ids: np.ndarray
    episode_ids: np.ndarray
    step_index: np.ndarray
    raw_advantages: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    next_index: np.ndarray
    adv_mean: float = 0.0
    adv_std: float = 1.0
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.actions.size

    @property
    def n_pairs(self) -> int:
        return int((self.next_index >= 0).sum())

    def minibatch(self, idx: np.ndarray) -> Minibatch:
        idx = np.asarray(idx, dtype=np.int64)
        nxt = self.next_index[idx]
        has = nxt >= 0
        succ = nxt[has]
        return Minibatch(
            obs=self.obs[idx],
            states=self.states[idx],
            actions=self.actions[idx],
            old_log_probs=self.old_log_probs[idx],
            old_probs=self.old_probs[idx],
            advantages=self.advantages[idx],
            returns=self.returns[idx],
            pair_rows=np.flatnonzero(has),
            next_obs=self.obs[succ],
            next_actions=self.actions[succ],
            next_old_log_probs=self.old_log_probs[succ],
            next_advantages=self.advantages[succ],
        )

    def full(self) -> Minibatch:
        return self.minibatch(np.arange(len(self)))


def build_batch(
    trajectories: Sequence[Trajectory],
    gamma: float,
    lam: float,
    normalize: bool = True,
) -> AdvantageBatch:
    """Flatten trajectories into arrays, computing GAE and pair links.

    Normalization is over the whole update batch: mean 0, population std 1
    (skipped scaling when the std is zero).
    """
    if not trajectories:
        raise ValidationError("no trajectories to batch")
    compute_advantages(trajectories, gamma, lam)
    rows: list[Transition] = []
    next_index: list[int] = []
    adv_parts, ret_parts = [], []
    for traj in trajectories:
        base = len(rows)
        tr = traj.transitions
        for k, t in enumerate(tr):
            rows.append(t)
            linked = k + 1 < len(tr) and not t.done
            next_index.append(base + k + 1 if linked else -1)
        adv_parts.append(traj.advantages)
        ret_parts.append(traj.returns)

    raw = np.concatenate(adv_parts)
    mean, std = 0.0, 1.0
    adv = raw.copy()
    if normalize:
        mean = float(raw.mean())
        std = float(raw.std())
        adv = raw - mean
        if std > 1e-12:
            adv = adv / std
        else:
            std = 1.0

    stats = episode_stats(trajectories)
    return AdvantageBatch(
        obs=np.stack([t.obs for t in rows]),
        states=np.stack([t.global_state for t in rows]),
        actions=np.array([t.action for t in rows], dtype=np.int64),
        old_log_probs=np.array([t.old_log_prob for t in rows]),
        old_probs=np.stack([t.old_distribution for t in rows]),
        rewards=np.array([t.reward for t in rows]),
        values=np.array([t.value_estimate for t in rows]),
        dones=np.array([t.done for t in rows], dtype=bool),
        agent_ids=np.array([t.agent_id for t in rows], dtype=np.int64),
        episode_ids=np.array([t.episode_id for t in rows], dtype=np.int64),
        step_index=np.array([t.step_index for t in rows], dtype=np.int64),
        raw_advantages=raw,
        advantages=adv,
        returns=np.concatenate(ret_parts),
        next_index=np.array(next_index, dtype=np.int64),
        adv_mean=mean,
        adv_std=std,
        stats={
            "episodes": len(stats),
            "mean_return": float(np.mean([r for r, _ in stats])) if stats else float("nan"),
            "win_rate": float(np.mean([w for _, w in stats])) if stats else float("nan"),
        },
    )


def minibatch_indices(n: int, size: int, seed) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into contiguous slices."""
    if size < 1:
        raise ValidationError("minibatch size must be >= 1")
    perm = np.random.default_rng(seed).permutation(n)
    if size >= n:
        return [perm]
    return [perm[i : i + size] for i in range(0, n, size)]


def minibatches(batch: AdvantageBatch, size: int, seed) -> Iterator[Minibatch]:
    for idx in minibatch_indices(len(batch), size, seed):
        yield batch.minibatch(idx)


DUMP_COLUMNS = (
    "episode_id",
    "agent_id",
    "step_index",
    "action",
    "old_log_prob",
    "reward",
    "value_estimate",
    "done",
    "obs",
    "global_state",
    "old_distribution",
)


def write_trajectory_dump(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    """Tab-separated dump, one transition per line, columns as in DUMP_COLUMNS.

    Vector fields are comma-joined ``repr`` floats.
    """

    def vec(a) -> str:
        return ",".join(repr(float(v)) for v in np.ravel(a))

    lines = ["\t".join(DUMP_COLUMNS)]
    for traj in trajectories:
        for t in traj.transitions:
            lines.append(
                "\t".join(
                    [
                        str(t.episode_id),
                        str(t.agent_id),
                        str(t.step_index),
                        str(t.action),
                        repr(t.old_log_prob),
                        repr(t.reward),
                        repr(t.value_estimate),
                        str(int(t.done)),
                        vec(t.obs),
                        vec(t.global_state),
                        vec(t.old_distribution),
                    ]
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")
