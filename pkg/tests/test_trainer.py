import math
from dataclasses import replace

import numpy as np
import pytest

from marpo import trainer
from marpo.approximator import init_params
from marpo.config import TrainConfig
from marpo.envs import MatrixGame, TwoStepCommit, make_env
from marpo.errors import TrainingError, ValidationError
from marpo.losses import LossBreakdown
from marpo.trainer import METRIC_COLUMNS, evaluate, exact_evaluation, run_id, train

FAST = TrainConfig(env_name="matrix", iterations=3, rollout_steps=64, minibatch_size=32, epochs=2,
                   eval_episodes=8, hidden_size=8)


def fixed_policy(env, action=0):
    s = env.spec()
    p = init_params(s.obs_dim, s.state_dim, s.action_count, hidden=(8, 8), seed=0)
    p = p.with_flat(np.zeros(p.size))
    p.policy[-1][action] = 200.0
    return p


def test_zero_learning_rate_keeps_parameters():
    cfg = replace(FAST, iterations=1, epochs=1, minibatch_size=10_000, learning_rate=0.0)
    report = train(cfg)
    start = init_params(3, 1, 2, hidden=(8, 8), seed=cfg.seed)
    assert np.array_equal(report.params.flat(), start.flat())
    assert len(report.rows) == 1
    row = report.rows[0]
    for name in METRIC_COLUMNS:
        assert not math.isnan(getattr(row, name))


def test_same_config_same_rows():
    a = train(FAST)
    b = train(FAST)
    strip = lambda rows: [replace(r, wall_time_s=0.0) for r in rows]
    assert strip(a.rows) == strip(b.rows)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert a.run_id == b.run_id == run_id(FAST)


def test_rows_are_complete_and_bounds_follow_target():
    report = train(replace(FAST, env_name="commit2"))
    assert [r.iteration for r in report.rows] == [1, 2, 3]
    steps = [r.env_steps for r in report.rows]
    assert steps == sorted(steps) and steps[0] >= 64
    for r in report.rows:
        assert r.target_kl >= FAST.kl_bias
        assert r.bound_lower < 1.0 < r.bound_upper


def test_mappo_reports_fixed_bounds():
    report = train(replace(FAST, algorithm="mappo"))
    assert all((r.bound_lower, r.bound_upper) == (0.8, 1.2) for r in report.rows)
    assert all(r.l1 == 0.0 for r in report.rows)


def test_mappo_matches_marpo_without_reflective_term():
    mappo = train(replace(FAST, env_name="commit2", algorithm="mappo"))
    marpo = train(replace(FAST, env_name="commit2", alpha=0.0, clip_mode="fixed"))
    strip = lambda rows: [replace(r, wall_time_s=0.0) for r in rows]
    assert strip(mappo.rows) == strip(marpo.rows)


def test_callback_stops_early():
    seen = []

    def cb(it, params, row):
        seen.append(it)
        return it == 2

    report = train(replace(FAST, iterations=10), callback=cb)
    assert seen == [1, 2] and len(report.rows) == 2


def test_non_finite_loss_aborts(monkeypatch):
    def broken(*args, **kwargs):
        nan = float("nan")
        return LossBreakdown(nan, nan, nan, nan, nan), np.zeros(1)

    monkeypatch.setattr(trainer, "marpo_loss", broken)
    with pytest.raises(TrainingError):
        train(replace(FAST, iterations=5))


def test_single_abort_is_recorded(monkeypatch):
    real = trainer.marpo_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            nan = float("nan")
            return LossBreakdown(nan, nan, nan, nan, nan), None
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer, "marpo_loss", flaky)
    report = train(FAST)
    assert report.aborted_iterations == [1]
    assert math.isnan(report.rows[0].l0) and not math.isnan(report.rows[1].l0)


def test_invalid_config():
    with pytest.raises(ValidationError):
        train(TrainConfig())


def test_evaluate_fixed_policies():
    env = MatrixGame()
    assert evaluate(fixed_policy(env), env, 20, seed=0) == (1.0, 1.0)
    env = TwoStepCommit()
    assert evaluate(fixed_policy(env), env, 20, seed=0) == (1.0, 1.0)


def test_evaluate_uniform_policy_sampled():
    env = MatrixGame()
    p = fixed_policy(env)
    p = p.with_flat(np.zeros(p.size))
    n = 10_000
    win, _ = evaluate(p, env, n, seed=1, greedy=False)
    assert abs(win - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)
    with pytest.raises(ValidationError):
        evaluate(p, env, 0, seed=1)


def test_exact_evaluation():
    env = MatrixGame()
    p = fixed_policy(env)
    assert exact_evaluation(p, env) == pytest.approx((1.0, 1.0))
    u = p.with_flat(np.zeros(p.size))
    assert exact_evaluation(u, env) == pytest.approx((0.25, 0.375), abs=1e-15)
    env = TwoStepCommit()
    u = fixed_policy(env)
    u = u.with_flat(np.zeros(u.size))
    assert exact_evaluation(u, env) == pytest.approx((0.125, 0.125 - 0.1 * 0.875), abs=1e-15)
    with pytest.raises(ValidationError):
        spread = make_env("spread")
        exact_evaluation(fixed_policy(spread), spread)
