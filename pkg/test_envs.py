#!/usr/bin/env python3
"""
Tests for the environment suite and rollout collection
"""
import math

import numpy as np
import pytest

from asyncdyna.envs import (PacingMode, Pendulum, PointMass, Reacher, RewardParams, Trajectory, Transition,
                            collect_rollout, env_reset, env_step, lorentzian_reward, make_env, scripted_controller,
                            trajectory_from_bytes, trajectory_to_bytes)
from asyncdyna.errors import InvalidArgumentError, NumericError


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds


def test_lorentzian_reward_values():
    rp = RewardParams(omega=1.0, v=1.0, alpha=1e-5)
    assert lorentzian_reward(0.0, rp) == pytest.approx(-math.log(1e-5), abs=1e-9)
    assert lorentzian_reward(1.0, rp) == pytest.approx(-1.0 - math.log(1.00001), abs=1e-9)
    assert lorentzian_reward(2.0, RewardParams(omega=1.0, v=0.0)) == pytest.approx(-4.0)


def test_lorentzian_reward_decreases_with_distance():
    values = lorentzian_reward(np.linspace(0.01, 3.0, 300), RewardParams())
    assert np.all(np.diff(values) < 0)


def test_reward_params_reject_bad_values():
    with pytest.raises(InvalidArgumentError):
        RewardParams(alpha=0.0)
    with pytest.raises(InvalidArgumentError):
        RewardParams(omega=-1.0)


def test_pendulum_energy_changes_only_by_integration_error():
    env = Pendulum(horizon=200)
    theta = math.pi - 0.05
    obs = np.array([math.cos(theta), math.sin(theta), 0.0])
    energy = env.energy(obs)
    start = energy
    for t in range(200):
        obs, _, _ = env.step(obs, [0.0], t)
        new_energy = env.energy(obs)
        assert abs(new_energy - energy) < 1e-2
        energy = new_energy
    assert abs(energy - start) < 1e-2


def test_pendulum_upright_at_rest_stays_put_under_zero_torque():
    env = Pendulum()
    traj = collect_rollout(env, lambda obs: np.zeros(1), env_seed=0)
    assert len(traj) == 200
    upright = np.array([1.0, 0.0, 0.0])
    obs, reward, _ = env.step(upright, [0.0])
    assert np.allclose(obs, upright)
    assert reward == pytest.approx(0.0)


def test_pendulum_clips_torque():
    env = Pendulum()
    obs = env.reset(3)
    assert np.array_equal(env.step(obs, [50.0])[0], env.step(obs, [2.0])[0])


def test_env_step_is_pure():
    env = make_env("reacher")
    obs = env.reset(7)
    first = env_step(env, obs, [0.3, -0.2])
    second = env_step(env, obs, [0.3, -0.2])
    assert np.array_equal(first[0], second[0])
    assert first[1] == second[1]


def test_reacher_reward_is_lorentzian_minus_penalties():
    rp = RewardParams(ctrl_penalty=0.1, vel_penalty=0.2)
    env = Reacher(reward_params=rp)
    obs = env.reset(1)
    action = np.array([0.5, -1.0])
    next_obs, reward, _ = env.step(obs, action)
    d = float(np.linalg.norm(next_obs[4:6] - np.array(env.target)))
    expected = lorentzian_reward(d, rp) - 0.1 * 1.25 - 0.2 * float(np.sum(next_obs[2:4] ** 2))
    assert reward == pytest.approx(expected)


def test_reacher_fingertip_matches_joint_angles():
    env = Reacher()
    obs = env.reset(5)
    l1, l2 = env.link_lengths
    q1, q2 = obs[0], obs[1]
    assert obs[4] == pytest.approx(l1 * math.cos(q1) + l2 * math.cos(q1 + q2))
    assert obs[5] == pytest.approx(l1 * math.sin(q1) + l2 * math.sin(q1 + q2))


def test_point_mass_double_integrator():
    env = PointMass(dt=0.1)
    next_obs, _, _ = env.step([0.0, 0.0, 1.0, 0.0], [1.0, -1.0])
    assert next_obs == pytest.approx([0.1 + 0.005, -0.005, 1.1, -0.1])


def test_done_only_at_horizon():
    env = PointMass(horizon=3)
    obs = env.reset(0)
    flags = []
    for t in range(3):
        obs, _, done = env.step(obs, [0.0, 0.0], t)
        flags.append(done)
    assert flags == [False, False, True]


def test_make_env_rejects_unknown_name():
    with pytest.raises(InvalidArgumentError):
        make_env("cartpole")


def test_virtual_rollout_reports_nominal_duration():
    env = PointMass(horizon=20, dt=0.05)
    traj = collect_rollout(env, lambda obs: np.zeros(2), PacingMode.VIRTUAL, env_seed=4)
    traj.validate(env.spec)
    assert len(traj) == 20
    assert traj.duration_s == pytest.approx(1.0)
    assert traj.return_undiscounted == pytest.approx(traj.rewards.sum())
    fast = collect_rollout(env, lambda obs: np.zeros(2), PacingMode.VIRTUAL, env_seed=4, speed_multiplier=2.0)
    assert fast.duration_s == pytest.approx(0.5)


def test_realtime_rollout_sleeps_one_period_per_step():
    env = PointMass(horizon=10, dt=0.01)
    clock = FakeClock()
    traj = collect_rollout(env, lambda obs: np.zeros(2), PacingMode.REALTIME, env_seed=0,
                           sleep=clock.sleep, clock=clock)
    assert len(clock.sleeps) == 10
    assert traj.duration_s == pytest.approx(0.1)
    assert traj.duration_s >= 10 * 0.01 - 1e-12


def test_rollout_rejects_non_finite_action():
    env = PointMass(horizon=5)
    with pytest.raises(NumericError):
        collect_rollout(env, lambda obs: np.array([math.nan, 0.0]))


def test_rollout_rejects_wrong_action_shape():
    with pytest.raises(InvalidArgumentError):
        collect_rollout(PointMass(horizon=5), lambda obs: np.zeros(3))


def test_trajectory_validate_detects_broken_chain():
    s0, s1, s2 = np.zeros(4), np.ones(4), np.full(4, 2.0)
    a = np.zeros(2)
    traj = Trajectory([Transition(s0, a, s1, 0.0, 0), Transition(s2, a, s0, 0.0, 1)], 0.0, env_seed=0)
    with pytest.raises(InvalidArgumentError):
        traj.validate()
    with pytest.raises(InvalidArgumentError):
        Trajectory([], 0.0, env_seed=0).validate()


def test_trajectory_bytes_preserve_transitions():
    env = PointMass(horizon=6)
    traj = collect_rollout(env, scripted_controller(env), env_seed=9)
    decoded = trajectory_from_bytes(trajectory_to_bytes(traj))
    decoded.validate(env.spec)
    assert decoded.env_seed == 9
    assert np.array_equal(decoded.states, traj.states)
    assert np.array_equal(decoded.actions, traj.actions)
    assert [tr.t for tr in decoded.transitions] == list(range(6))
    assert decoded.return_undiscounted == traj.return_undiscounted


def test_trajectory_bytes_reject_truncation():
    env = PointMass(horizon=4)
    data = trajectory_to_bytes(collect_rollout(env, lambda obs: np.zeros(2)))
    with pytest.raises(InvalidArgumentError):
        trajectory_from_bytes(data[:-8])


def test_scripted_controller_only_for_pendulum_and_point_mass():
    assert scripted_controller(make_env("pendulum")) is not None
    with pytest.raises(InvalidArgumentError):
        scripted_controller(make_env("reacher"))


@pytest.mark.parametrize("name", ["pendulum", "reacher", "point_mass"])
def test_env_reset_is_seeded(name):
    env = make_env(name)
    first = env_reset(env, 3)
    assert first.shape == (env.spec.obs_dim,)
    assert np.array_equal(first, env_reset(env, 3))
    assert not np.array_equal(first, env_reset(env, 4))


def test_rollout_keeps_sampled_action_beside_clipped_one():
    env = PointMass(horizon=3)
    traj = collect_rollout(env, lambda obs: np.array([5.0, -0.5]), env_seed=2)
    assert np.array_equal(traj.actions, np.tile([1.0, -0.5], (3, 1)))
    assert np.array_equal(traj.sampled_actions, np.tile([5.0, -0.5], (3, 1)))
    decoded = trajectory_from_bytes(trajectory_to_bytes(traj))
    assert np.array_equal(decoded.sampled_actions, traj.sampled_actions)
    assert np.array_equal(decoded.actions, traj.actions)


def semi_implicit_pendulum_step(theta, theta_dot, torque, g=10.0, length=1.0, mass=1.0, dt=0.05):
    theta_ddot = -3.0 * g / (2.0 * length) * math.sin(theta + math.pi) + 3.0 / (mass * length ** 2) * torque
    theta_dot = max(-8.0, min(8.0, theta_dot + theta_ddot * dt))
    return theta + theta_dot * dt, theta_dot


@pytest.mark.parametrize("theta, torque", [(math.pi, 0.0), (math.pi - 0.1, 0.0), (math.pi - 0.1, 0.5)])
def test_pendulum_step_from_hanging_matches_semi_implicit_euler(theta, torque):
    env = Pendulum()
    obs = np.array([math.cos(theta), math.sin(theta), 0.0])
    next_obs, _, _ = env.step(obs, [torque])
    theta1, theta_dot1 = semi_implicit_pendulum_step(theta, 0.0, torque)
    assert next_obs == pytest.approx([math.cos(theta1), math.sin(theta1), theta_dot1], abs=1e-12)


def test_pendulum_hanging_at_rest_stays_put():
    obs, _, _ = Pendulum().step(np.array([-1.0, 0.0, 0.0]), [0.0])
    assert obs == pytest.approx([-1.0, 0.0, 0.0], abs=1e-12)


def test_pendulum_step_by_hand_off_hanging():
    # theta = pi - 0.1: theta_ddot = 15 sin(0.1) + 3 * 0.5 = 2.99750125
    obs = np.array([math.cos(math.pi - 0.1), math.sin(math.pi - 0.1), 0.0])
    next_obs, _, _ = Pendulum().step(obs, [0.5])
    assert next_obs[2] == pytest.approx(0.1498750624, abs=1e-9)
    assert math.atan2(next_obs[1], next_obs[0]) == pytest.approx(math.pi - 0.1 + 0.0074937531, abs=1e-9)


def test_reacher_reset_ranges_over_many_seeds():
    env = Reacher()
    l1, l2 = env.link_lengths
    observations = np.stack([env.reset(seed) for seed in range(1000)])
    q1, q2 = observations[:, 0], observations[:, 1]
    assert np.all((q1 >= -math.pi) & (q1 <= math.pi))
    assert np.all((q2 >= -math.pi / 2) & (q2 <= math.pi / 2))
    assert np.all(observations[:, 2:4] == 0.0)
    assert observations[:, 4] == pytest.approx(l1 * np.cos(q1) + l2 * np.cos(q1 + q2))
    assert observations[:, 5] == pytest.approx(l1 * np.sin(q1) + l2 * np.sin(q1 + q2))
    # the draws cover the ranges rather than clustering
    assert q1.min() < -3.0 and q1.max() > 3.0
    assert q2.min() < -1.4 and q2.max() > 1.4
