"""Toy cooperative games with deterministic dynamics.

Every environment returns one observation row per agent with a one-hot
agent index appended, so a single shared policy can still act differently
per agent. Rewards are shared by the team.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ProtocolError, ValidationError


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    action_count: int
    obs_dim: int
    state_dim: int
    max_steps: int
    gamma: float = 0.99

    def __post_init__(self) -> None:
        for name in ("n_agents", "action_count", "obs_dim", "state_dim", "max_steps"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError("gamma must be in [0, 1]")


@dataclass
class StepResult:
    observations: np.ndarray
    global_state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class CooperativeEnv:
    """Base class: bookkeeping for step counts, validation and agent ids."""

    name = "base"

    def __init__(self) -> None:
        self._t = 0
        self._done = True
        self._return = 0.0

    def spec(self) -> EnvSpec:
        raise NotImplementedError

    @property
    def n_agents(self) -> int:
        return self.spec().n_agents

    def reset(self, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        self._t = 0
        self._done = False
        self._return = 0.0
        self._reset(np.random.default_rng(seed))
        return self._observations(), self._state()

    def step(self, joint_action: Sequence[int]) -> StepResult:
        if self._done:
            raise ProtocolError("step() called on a finished episode; call reset()")
        spec = self.spec()
        actions = [int(a) for a in joint_action]
        if len(actions) != spec.n_agents:
            raise ValidationError(f"expected {spec.n_agents} actions, got {len(actions)}")
        if any(not 0 <= a < spec.action_count for a in actions):
            raise ValidationError(f"action out of range in {actions}")
        reward = float(self._apply(actions))
        self._t += 1
        self._return += reward
        done = self._terminal() or self._t >= spec.max_steps
        self._done = done
        info = {"t": self._t}
        if done:
            info["win"] = self._win()
            info["episode_return"] = self._return
        return StepResult(self._observations(), self._state(), reward, done, info)

    def _with_id(self, rows: np.ndarray) -> np.ndarray:
        n = self.spec().n_agents
        return np.concatenate([rows, np.eye(n)], axis=1)

    # hooks
    def _reset(self, rng: np.random.Generator) -> None:
        pass

    def _apply(self, actions: list[int]) -> float:
        raise NotImplementedError

    def _terminal(self) -> bool:
        return False

    def _win(self) -> bool:
        raise NotImplementedError

    def _observations(self) -> np.ndarray:
        raise NotImplementedError

    def _state(self) -> np.ndarray:
        raise NotImplementedError


class MatrixGame(CooperativeEnv):
    """One-shot two-player coordination game.

    The default payoff has a risk-free suboptimal equilibrium at (1, 1)
    worth 0.5 and the optimum at (0, 0) worth 1.0.
    """

    name = "matrix"

    def __init__(self, payoff: Sequence[Sequence[float]] = ((1.0, 0.0), (0.0, 0.5))) -> None:
        super().__init__()
        self.payoff = np.asarray(payoff, dtype=np.float64)
        if self.payoff.ndim != 2 or self.payoff.shape[0] != self.payoff.shape[1]:
            raise ValidationError("payoff must be a square matrix")
        self._last: tuple[int, int] | None = None

    def spec(self) -> EnvSpec:
        return EnvSpec(n_agents=2, action_count=self.payoff.shape[0], obs_dim=3, state_dim=1, max_steps=1)

    def _reset(self, rng) -> None:
        self._last = None

    def _apply(self, actions) -> float:
        self._last = (actions[0], actions[1])
        return self.payoff[actions[0], actions[1]]

    def _win(self) -> bool:
        best = np.unravel_index(np.argmax(self.payoff), self.payoff.shape)
        return self._last == tuple(int(i) for i in best)

    def _observations(self) -> np.ndarray:
        return self._with_id(np.ones((2, 1)))

    def _state(self) -> np.ndarray:
        return np.ones(1)


class TwoStepCommit(CooperativeEnv):
    """Commit then execute; the payoff for step 1 only arrives at step 2.

    Step 1: each agent picks commit-A (0) or commit-B (1); reward 0.
    Step 2: each agent picks execute (0) or abort (1); reward +1 if the
    commits matched and both executed, otherwise -0.1.

    Observation per agent: ``[phase, own commit one-hot (2)] + agent id``.
    Global state: ``[phase, commit one-hot of agent 0, of agent 1]``.
    """

    name = "commit2"
    SUCCESS = 1.0
    FAILURE = -0.1

    def __init__(self) -> None:
        super().__init__()
        self._commits: list[int] | None = None
        self._outcome: float | None = None

    def spec(self) -> EnvSpec:
        return EnvSpec(n_agents=2, action_count=2, obs_dim=5, state_dim=5, max_steps=2)

    def _reset(self, rng) -> None:
        self._commits = None
        self._outcome = None

    def _apply(self, actions) -> float:
        if self._t == 0:
            self._commits = list(actions)
            return 0.0
        matched = self._commits[0] == self._commits[1]
        executed = all(a == 0 for a in actions)
        self._outcome = self.SUCCESS if matched and executed else self.FAILURE
        return self._outcome

    def _win(self) -> bool:
        return self._outcome == self.SUCCESS

    def _commit_rows(self) -> np.ndarray:
        rows = np.zeros((2, 2))
        if self._commits is not None:
            rows[[0, 1], self._commits] = 1.0
        return rows

    def _observations(self) -> np.ndarray:
        phase = np.full((2, 1), float(min(self._t, 1)))
        return self._with_id(np.concatenate([phase, self._commit_rows()], axis=1))

    def _state(self) -> np.ndarray:
        return np.concatenate([[float(min(self._t, 1))], self._commit_rows().ravel()])


class GridSpread(CooperativeEnv):
    """Agents on an L x L grid must cover landmarks.

    Actions: 0 stay, 1 up, 2 down, 3 left, 4 right (moves clipped at the
    border). Reward per step is minus the summed Manhattan distance from
    each landmark to its nearest agent, so it is 0 exactly when every
    landmark is covered. Positions are drawn from the reset seed.
    """

    name = "spread"
    _MOVES = np.array([[0, 0], [0, 1], [0, -1], [-1, 0], [1, 0]])

    def __init__(self, size: int = 5, n_agents: int = 3, n_landmarks: int | None = None, max_steps: int | None = None):
        super().__init__()
        if size < 1 or n_agents < 1:
            raise ValidationError("grid size and agent count must be >= 1")
        self.size = size
        self.n = n_agents
        self.m = n_agents if n_landmarks is None else n_landmarks
        if self.m > size * size:
            raise ValidationError("more landmarks than grid cells")
        self.max_steps = 2 * size if max_steps is None else max_steps
        self.agents = np.zeros((self.n, 2), dtype=np.int64)
        self.landmarks = np.zeros((self.m, 2), dtype=np.int64)

    def spec(self) -> EnvSpec:
        obs_dim = 2 + 2 * self.m + 2 * (self.n - 1) + 1 + self.n
        return EnvSpec(
            n_agents=self.n,
            action_count=5,
            obs_dim=obs_dim,
            state_dim=2 * (self.n + self.m),
            max_steps=self.max_steps,
        )

    def _cells(self, rng, k: int) -> np.ndarray:
        flat = rng.choice(self.size * self.size, size=k, replace=False)
        return np.stack([flat // self.size, flat % self.size], axis=1).astype(np.int64)

    def _reset(self, rng) -> None:
        self.landmarks = self._cells(rng, self.m)
        self.agents = self._cells(rng, self.n) if self.n <= self.size**2 else rng.integers(0, self.size, (self.n, 2))

    def _distances(self) -> np.ndarray:
        d = np.abs(self.landmarks[:, None, :] - self.agents[None, :, :]).sum(axis=2)
        return d.min(axis=1)

    def _apply(self, actions) -> float:
        self.agents = np.clip(self.agents + self._MOVES[actions], 0, self.size - 1)
        return -float(self._distances().sum())

    def _win(self) -> bool:
        return bool(np.all(self._distances() == 0))

    def _observations(self) -> np.ndarray:
        scale = float(self.size)
        rows = []
        for i in range(self.n):
            own = self.agents[i]
            others = np.delete(self.agents, i, axis=0)
            rows.append(
                np.concatenate(
                    [
                        own / scale,
                        ((self.landmarks - own) / scale).ravel(),
                        ((others - own) / scale).ravel(),
                        [self._t / self.max_steps],
                    ]
                )
            )
        return self._with_id(np.array(rows))

    def _state(self) -> np.ndarray:
        return np.concatenate([self.agents.ravel(), self.landmarks.ravel()]) / float(self.size)


ENVIRONMENTS = {"matrix": MatrixGame, "commit2": TwoStepCommit, "spread": GridSpread}


def make_env(name: str) -> CooperativeEnv:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValidationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
