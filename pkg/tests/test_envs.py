from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safe_explore.envs import (
    BALL_DAMPING,
    DT,
    BallEnv,
    SpaceshipEnv,
    State,
    Termination,
    make_task,
    task_spec,
)


def test_ball1d_spec():
    spec = task_spec("Ball1D")
    assert spec.action_dim == 1
    assert spec.num_constraints == 2
    assert spec.thresholds == (0.9, -0.1)
    assert spec.hard_limits == (1.0, 0.0)
    assert spec.episode_limit_steps == 150


def test_corridor_and_arena_specs():
    corridor = task_spec("SpaceshipCorridor")
    assert corridor.num_constraints == 2
    assert corridor.hard_limits[0] - (-corridor.hard_limits[1]) == 1.0  # wall separation
    assert corridor.episode_limit_steps == 300
    arena = task_spec("SpaceshipArena")
    assert arena.num_constraints == 4
    assert arena.episode_limit_steps == 900


def test_unknown_task():
    with pytest.raises(ValueError):
        make_task("Pendulum")


def test_describe_is_json():
    assert json.loads(make_task("Ball3D").describe())["state_dim"] == 9


@pytest.mark.parametrize("seed", range(5))
def test_ball_reset_ranges(seed):
    env = make_task("Ball3D", seed)
    env.reset()
    assert np.all((0.1 <= env.position) & (env.position <= 0.9))
    assert np.all(env.velocity == 0)
    assert np.all((0.2 <= env.target) & (env.target <= 0.8))


def test_reset_is_deterministic():
    a = make_task("Ball1D", 3).reset()
    b = make_task("Ball1D", 3).reset()
    assert a.obs.tobytes() == b.obs.tobytes()


def test_ball_reward_at_target_is_one():
    env = BallEnv(1)
    assert env.reward(np.array([0.4]), np.array([0.4])) == 1.0
    assert env.reward(np.array([0.4]), np.array([0.4 + 0.32])) == 0.0
    assert env.reward(np.array([0.0]), np.array([0.8])) == 0.0


def test_ball_hold_displacement():
    env = BallEnv(1)
    env.reset()
    env.position = np.array([0.5])
    env.step(np.array([1.0]))
    expected = DT * sum(BALL_DAMPING**k for k in range(1, 5))
    assert env.position[0] - 0.5 == pytest.approx(expected, abs=1e-15)


def test_ball_push_out_violates():
    env = BallEnv(1)
    env.reset()
    env.position = np.array([0.99])
    res = env.step(np.array([1.0]))
    assert res.info["position"][0] > 1.0
    assert res.termination is Termination.CONSTRAINT_VIOLATION


def test_ball_time_limit():
    env = BallEnv(1)
    env.reset()
    for _ in range(149):
        assert env.step(np.zeros(1)).termination is Termination.NONE
    assert env.step(np.zeros(1)).termination is Termination.TIME_LIMIT
    with pytest.raises(RuntimeError):
        env.step(np.zeros(1))


def test_ball_target_relocates_every_ten_steps():
    env = BallEnv(1, seed=1)
    env.reset()
    targets = []
    for _ in range(30):
        env.step(np.zeros(1))
        targets.append(env.target.copy())
    changes = [k + 1 for k in range(1, 30) if not np.array_equal(targets[k], targets[k - 1])]
    assert changes == [10, 20, 30]


def test_corridor_zero_action_from_rest():
    env = SpaceshipEnv(arena=False)
    env.reset()
    before = env.position.copy()
    res = env.step(np.zeros(2))
    np.testing.assert_array_equal(env.position, before)
    assert res.reward == 0.0


def test_corridor_boundary_signal_is_not_a_violation():
    env = SpaceshipEnv(arena=False)
    sig = env.safety_signals(np.array([0.95, 1.0]))
    assert sig[0] == 0.95 == env.spec.thresholds[0]
    assert not env._hard_violation(sig)


def test_arena_center_signals_zero():
    env = SpaceshipEnv(arena=True)
    sig = env.safety_signals(np.zeros(2))
    np.testing.assert_array_equal(sig, np.zeros(4))
    assert np.all(sig < np.asarray(env.spec.thresholds))


def test_ball_signals_direct_read():
    env = BallEnv(1)
    np.testing.assert_array_equal(env.safety_signals(np.array([0.5])), [0.5, -0.5])
    state = State(np.array([0.3, 0.0, 0.5]), np.zeros(2))
    np.testing.assert_array_equal(env.safety_signals(state), [0.3, -0.3])


@pytest.mark.parametrize("task", ["Ball1D", "Ball3D", "SpaceshipCorridor", "SpaceshipArena"])
def test_signals_affine_with_declared_normals(task):
    env = make_task(task)
    d = env.normals.shape[1]
    p = np.full(d, 0.3)
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        slope = env.safety_signals(p + e) - env.safety_signals(p)
        np.testing.assert_array_equal(slope, env.normals[:, j])


def test_spaceship_reaches_target():
    env = SpaceshipEnv(arena=False)
    env.reset()
    env.position = np.array([0.5, 2.99])
    res = env.step(np.zeros(2))
    assert res.termination is Termination.TARGET_REACHED
    assert res.reward == 1000.0


def test_spaceship_hits_wall():
    env = SpaceshipEnv(arena=False)
    env.reset()
    env.position = np.array([0.999, 1.0])
    env.velocity = np.array([1.0, 0.0])
    res = env.step(np.zeros(2))
    assert res.termination is Termination.CONSTRAINT_VIOLATION
    assert res.reward == 0.0


def test_spaceship_speed_non_increasing_without_thrust():
    env = SpaceshipEnv(arena=True, seed=2)
    env.reset()
    env.velocity = np.array([0.3, -0.2])
    speeds = []
    for _ in range(50):
        env.step(np.zeros(2))
        speeds.append(np.linalg.norm(env.velocity))
    assert all(b < a for a, b in zip(speeds, speeds[1:]))


def test_rejects_bad_actions():
    env = BallEnv(1)
    env.reset()
    with pytest.raises(ValueError):
        env.step(np.zeros(2))
    with pytest.raises(ValueError):
        env.step(np.array([np.nan]))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["Ball1D", "Ball3D", "SpaceshipCorridor", "SpaceshipArena"]), st.integers(0, 1000))
def test_random_rollouts_keep_invariants(task, seed):
    env = make_task(task, seed)
    rng = np.random.default_rng(seed)
    state = env.reset()
    hard = np.asarray(env.spec.hard_limits)
    while True:
        res = env.step(rng.uniform(-1, 1, env.spec.action_dim))
        violated = bool(np.any(env.safety_signals(res.info["position"]) > hard))
        assert violated == (res.termination is Termination.CONSTRAINT_VIOLATION)
        if env.spec.domain == "ball":
            assert 0.0 <= res.reward <= 1.0
        else:
            assert res.reward in (0.0, 1000.0)
        if res.done:
            break
        state = res.next_state
    assert state is not None


@pytest.mark.parametrize("task", ["Ball3D", "SpaceshipArena"])
def test_same_seed_same_trajectory(task):
    def roll():
        env = make_task(task, 9)
        env.reset()
        rng = np.random.default_rng(0)
        out = []
        for _ in range(40):
            res = env.step(rng.uniform(-1, 1, env.spec.action_dim))
            out.append(res.next_state.obs)
            if res.done:
                break
        return np.concatenate(out)

    assert roll().tobytes() == roll().tobytes()


def test_snapshot_resimulates_exactly():
    env = make_task("Ball1D", 4)
    env.reset()
    env.step(np.array([0.3]))
    snap = env.get_snapshot()
    a = env.step(np.array([-0.7]))
    env.set_snapshot(snap)
    b = env.step(np.array([-0.7]))
    assert a.next_state.obs.tobytes() == b.next_state.obs.tobytes()
