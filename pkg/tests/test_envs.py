import numpy as np
import pytest

from marpo.envs import GridSpread, MatrixGame, TwoStepCommit, make_env
from marpo.errors import ProtocolError, ValidationError

A, B = 0, 1
EXECUTE, ABORT = 0, 1


def play(env, *joint):
    env.reset(0)
    total = 0.0
    for a in joint:
        res = env.step(a)
        total += res.reward
    return total, res


def test_matrix_payoffs():
    env = MatrixGame()
    for joint, reward in (((0, 0), 1.0), ((1, 1), 0.5), ((0, 1), 0.0), ((1, 0), 0.0)):
        total, res = play(env, joint)
        assert total == reward and res.done
        assert res.info["win"] == (joint == (0, 0))
        assert res.info["episode_return"] == reward


def test_matrix_observation():
    obs, state = MatrixGame().reset(3)
    np.testing.assert_array_equal(obs, [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    np.testing.assert_array_equal(state, [1.0])


@pytest.mark.parametrize(
    "commits, execs, expect",
    [
        ((A, A), (EXECUTE, EXECUTE), 1.0),
        ((B, B), (EXECUTE, EXECUTE), 1.0),
        ((A, B), (EXECUTE, EXECUTE), -0.1),
        ((A, B), (ABORT, ABORT), -0.1),
        ((A, A), (EXECUTE, ABORT), -0.1),
    ],
)
def test_commit_returns(commits, execs, expect):
    env = TwoStepCommit()
    env.reset(0)
    first = env.step(commits)
    assert first.reward == 0.0 and not first.done
    second = env.step(execs)
    assert second.done
    assert first.reward + second.reward == pytest.approx(expect, abs=1e-15)
    assert second.info["win"] == (expect == 1.0)


def test_commit_observations():
    env = TwoStepCommit()
    obs, state = env.reset(0)
    assert np.all(obs[:, 0] == 0.0)
    res = env.step((A, B))
    # phase 1, own commit one-hot, agent id
    np.testing.assert_array_equal(res.observations, [[1, 1, 0, 1, 0], [1, 0, 1, 0, 1]])
    np.testing.assert_array_equal(res.global_state, [1, 1, 0, 0, 1])


def test_specs():
    m = MatrixGame().spec()
    assert (m.n_agents, m.action_count, m.max_steps) == (2, 2, 1)
    assert TwoStepCommit().spec().max_steps == 2
    g = GridSpread(size=5, n_agents=3)
    s = g.spec()
    assert s.state_dim == 2 * (3 + 3)
    obs, state = g.reset(1)
    assert obs.shape == (3, s.obs_dim) and state.shape == (s.state_dim,)


def test_same_seed_same_observations():
    a, b = GridSpread(), GridSpread()
    oa, sa = a.reset(42)
    ob, sb = b.reset(42)
    assert np.array_equal(oa, ob) and np.array_equal(sa, sb)
    rng = np.random.default_rng(0)
    for _ in range(5):
        act = rng.integers(0, 5, 3)
        ra, rb = a.step(act), b.step(act)
        assert np.array_equal(ra.observations, rb.observations) and ra.reward == rb.reward


def test_spread_reward_and_episode_length():
    env = GridSpread(size=3, n_agents=2)
    obs, _ = env.reset(0)
    steps = 0
    while True:
        res = env.step([0, 0])
        steps += 1
        d = np.abs(env.landmarks[:, None] - env.agents[None]).sum(axis=2).min(axis=1).sum()
        assert res.reward == -float(d)
        if res.done:
            break
    assert steps == env.spec().max_steps


def test_protocol_errors():
    env = MatrixGame()
    env.reset(0)
    with pytest.raises(ValidationError):
        env.step((0, 2))
    with pytest.raises(ValidationError):
        env.step((0,))
    env.step((0, 0))
    with pytest.raises(ProtocolError):
        env.step((0, 0))
    with pytest.raises(ProtocolError):
        TwoStepCommit().step((0, 0))


def test_make_env():
    assert isinstance(make_env("matrix"), MatrixGame)
    with pytest.raises(ValidationError):
        make_env("starcraft")
