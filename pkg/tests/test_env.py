import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatnav.env import (AgentState, EnvConfig, NavEnv, Photometric, apply_photometric, distance_to_goal,
                          goal_offset, randomize_observation, read_trajectory_log, wrap_angle)
from splatnav.errors import EpisodeClosedError
from splatnav.world import Box, FusionConfig, LayoutTemplate, SceneLayout, WorldBuilder, collides

ROOM = {"builtin": "room", "args": {"size": [4, 4], "height": 2.5, "spacing": 0.5}}
BOUNDS = [[0, 0, 0], [4, 4, 2.5]]
FAST = FusionConfig(heights=(1.0,), yaws=6, pitches=(-0.5, 0.0, 0.5), resolution=24, camera_spacing=1.5)


@pytest.fixture(scope="module")
def builder():
    return WorldBuilder(FAST)


def template():
    return LayoutTemplate(ROOM, BOUNDS, [[0.8, 0.8, 1.0], [1.2, 3.2, 1.0]], [[2.8, 0.8, 1.0], [3.2, 3.2, 1.0]],
                          min_spawn_goal_distance=1.0)


def fixed_layout(spawn=(1.0, 1.0, 1.0), goal=(3.0, 1.0, 1.0)):
    return SceneLayout(ROOM, BOUNDS, [spawn, spawn], goal)


def test_distance_examples():
    assert distance_to_goal(AgentState([1, 2, 3]), [1, 2, 3]) == 0
    assert distance_to_goal(AgentState([3, 4, 0]), [0, 0, 0]) == 5.0
    rng = np.random.default_rng(0)
    for a, b in rng.normal(size=(20, 2, 3)):
        assert distance_to_goal(AgentState(a), b) == pytest.approx(math.sqrt(np.sum((a - b) ** 2)), rel=1e-15)


def test_wrap_angle():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.3) == 0.3


def test_config_defaults_and_validation():
    c = EnvConfig()
    assert (c.v_max, c.w_max, c.r_goal, c.r_col, c.t_limit, c.kappa, c.success_radius, c.gamma) == \
        (1.5, 1.5, 10.0, -1.0, 5000, 0.1, 0.5, 0.99)
    assert c.dt == pytest.approx(1 / 30)
    for bad in ({"dt": 0}, {"t_limit": 0}, {"success_radius": 0}):
        with pytest.raises(ValueError):
            EnvConfig(**bad)


def test_photometric_examples():
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(apply_photometric(img, Photometric()), img)
    white = np.ones((4, 4, 3))
    np.testing.assert_array_equal(apply_photometric(white, Photometric(brightness=0.5)), 0.5)
    c = EnvConfig()
    assert c.brightness == (0.5, 1.5) and c.hue == (-0.5, 0.5)
    a = randomize_observation(img, 3)
    np.testing.assert_array_equal(a, randomize_observation(img, 3))
    assert a.min() >= 0 and a.max() <= 1
    # a full turn of hue is the identity, a half turn maps red to cyan
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1
    np.testing.assert_allclose(apply_photometric(red, Photometric(hue_shift=0.5)), 1 - red, atol=1e-12)


def test_reset_determinism_and_point_spawn(builder):
    env = NavEnv(template(), EnvConfig(), builder)
    a = env.reset(5)
    pos_a, goal_a = env.state.position.copy(), env.goal.copy()
    b = env.reset(5)
    assert np.array_equal(pos_a, env.state.position) and np.array_equal(goal_a, env.goal)
    assert a.observation.tobytes() == b.observation.tobytes()
    assert a.observation.shape == (64, 64, 3) and a.observation.dtype == np.float32
    assert env.steps == 0 and np.all(env.state.linear_velocity == 0) and env.state.yaw_rate == 0
    env.reset(0, layout=fixed_layout(spawn=(1.1, 2.2, 1.0)))
    np.testing.assert_array_equal(env.state.position, [1.1, 2.2, 1.0])


def test_fifty_spawns_collision_free(builder):
    env = NavEnv(template(), EnvConfig(randomize=False), builder)
    for seed in range(50):
        env.reset(seed)
        assert not collides(env.world.grid, env.state.position, env.cfg.agent_radius)
        assert env.world.layout.spawn_region.contains(env.state.position)


def test_step_kinematics_and_reward(builder):
    cfg = EnvConfig(random_spawn_yaw=False, randomize=False)
    env = NavEnv(fixed_layout(spawn=(1.0, 2.0, 1.0), goal=(3.0, 2.0, 1.0)), cfg, builder)
    env.reset(0)
    r = env.step([1, 0, 0, 0])
    np.testing.assert_allclose(env.state.position, [1 + 1 / 30, 2.0, 1.0], atol=1e-15)
    assert r.reward == pytest.approx(0.1 * (1 / 30) - 1 / 5000, abs=1e-12)
    # clipping of commands
    r = env.step([9, -9, 0, 7])
    np.testing.assert_array_equal(env.state.linear_velocity, [1.5, -1.5, 0])
    assert env.state.yaw_rate == 1.5
    assert np.all(np.abs(r.proprioception[2:5]) <= 1.5)


def test_reward_example_progress_one_metre():
    c = EnvConfig()
    assert c.kappa * (3.0 - 2.0) + c.r_step == pytest.approx(0.0998, abs=1e-12)


def test_goal_terminal_and_closed_episode(builder):
    cfg = EnvConfig(random_spawn_yaw=False, randomize=False, success_radius=0.5)
    env = NavEnv(fixed_layout(spawn=(2.45, 2.0, 1.0), goal=(3.0, 2.0, 1.0)), cfg, builder)
    env.reset(0)
    r = env.step([1.5, 0, 0, 0])
    assert r.terminal == "goal"
    assert r.reward == pytest.approx(0.1 * 0.05 - 1 / 5000 + 10, abs=1e-12)
    with pytest.raises(EpisodeClosedError):
        env.step([0, 0, 0, 0])


def test_goal_beats_timeout(builder):
    cfg = EnvConfig(random_spawn_yaw=False, randomize=False, t_limit=1)
    env = NavEnv(fixed_layout(spawn=(2.45, 2.0, 1.0), goal=(3.0, 2.0, 1.0)), cfg, builder)
    env.reset(0)
    assert env.step([1.5, 0, 0, 0]).terminal == "goal"
    env.reset(0)
    assert env.step([0, 0, 0, 0]).terminal == "timeout"


def test_collision_terminal(builder):
    cfg = EnvConfig(random_spawn_yaw=False, randomize=False)
    env = NavEnv(fixed_layout(spawn=(0.5, 2.0, 1.0), goal=(3.0, 2.0, 1.0)), cfg, builder)
    env.reset(0)
    for _ in range(30):
        r = env.step([-1.5, 0, 0, 0])
        if r.done:
            break
    assert r.terminal == "collision"
    assert r.reward == pytest.approx(0.1 * (-0.05) - 1 / 5000 - 1, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_reward_telescopes(seed):
    cfg = EnvConfig(randomize=False, t_limit=60)
    env = NavEnv(template(), cfg, _SHARED)
    env.reset(seed)
    rng = np.random.default_rng(seed)
    total = 0.0
    while True:
        r = env.step(rng.normal(0, 1.5, 4), render_obs=False)
        total += r.reward
        if r.done:
            break
    bonus = {"goal": cfg.r_goal, "collision": cfg.r_col, "timeout": 0.0}[r.terminal]
    assert total == pytest.approx(cfg.r_step * env.steps + cfg.kappa * (env.d0 - env.distance) + bonus, abs=1e-9)


_SHARED = WorldBuilder(FAST)


def test_body_frame_goal_offset():
    s = AgentState([0, 0, 1], yaw=math.pi / 2)
    np.testing.assert_allclose(goal_offset(s, [0, 2, 1]), [2, 0, 0], atol=1e-12)


def test_observation_determinism_and_randomization(builder):
    env = NavEnv(template(), EnvConfig(randomize=True), builder)
    a = env.reset(11).observation
    b = env.observe()
    assert a.tobytes() == b.tobytes() and a.min() >= 0 and a.max() <= 1
    plain = NavEnv(template(), EnvConfig(randomize=False), builder).reset(11).observation
    assert not np.array_equal(a, plain)


def test_trajectory_log(builder, tmp_path):
    path = tmp_path / "traj.jsonl"
    env = NavEnv(template(), EnvConfig(randomize=False, t_limit=5), builder, log_path=path)
    for seed in (1, 2):
        env.reset(seed)
        while not env.step([0.1, 0, 0, 0.1], render_obs=False).done:
            pass
    env.close()
    eps = read_trajectory_log(path)
    assert len(eps) == 2 and len(eps[0]["steps"]) == 5
    head = eps[1]["episode"]
    assert head["seed"] == 2 and len(head["goal"]) == 3 and len(head["layout_hash"]) == 16
    assert set(eps[0]["steps"][0]) == {"t", "position", "yaw", "action", "reward", "terminal"}
    assert eps[0]["steps"][-1]["terminal"] == "timeout"
