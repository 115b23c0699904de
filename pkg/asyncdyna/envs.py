"""
Continuous-control environments with exact reference dynamics.

Environments are stateless: the observation *is* the state, so `step` is a
pure function of (observation, action) and a learned model or an oracle can
stand in for it. Three tasks are provided:

- pendulum: swing-up, obs (cos th, sin th, th_dot), th = 0 upright.
- reacher: planar 2-link arm reaching a fixed target with the Lorentzian
  distance reward plus torque and joint-velocity penalties.
- point_mass: 2-d double integrator driven to the origin.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import StrEnum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, NumericError

logger = logging.getLogger(__name__)

PolicyFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    horizon: int = 200
    dt: float = 0.05
    action_low: Tuple[float, ...] = ()
    action_high: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise InvalidArgumentError("obs_dim and act_dim must be positive")
        if self.horizon < 1:
            raise InvalidArgumentError(f"horizon must be >= 1, got {self.horizon}")
        if not self.dt > 0:
            raise InvalidArgumentError(f"dt must be > 0, got {self.dt}")
        if len(self.action_low) != self.act_dim or len(self.action_high) != self.act_dim:
            raise InvalidArgumentError("action bounds must have one entry per action dimension")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise InvalidArgumentError("every action bound needs low < high")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    t: int
    # action as sampled, before clipping to the bounds; None when it equals `a`
    a_sampled: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    transitions: List[Transition]
    return_undiscounted: float
    env_seed: int
    duration_s: float = 0.0
    policy_version: int = 0

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> np.ndarray:
        return np.stack([tr.s for tr in self.transitions])

    @property
    def actions(self) -> np.ndarray:
        return np.stack([tr.a for tr in self.transitions])

    @property
    def sampled_actions(self) -> np.ndarray:
        return np.stack([tr.a if tr.a_sampled is None else tr.a_sampled for tr in self.transitions])

    @property
    def next_states(self) -> np.ndarray:
        return np.stack([tr.s_next for tr in self.transitions])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.r for tr in self.transitions], dtype=np.float64)

    def validate(self, spec: Optional[EnvSpec] = None) -> None:
        """Check the chaining invariant and, if given, the dimensions of `spec`."""
        if not self.transitions:
            raise InvalidArgumentError("trajectory has no transitions")
        for k, tr in enumerate(self.transitions):
            if spec is not None:
                if tr.s.shape != (spec.obs_dim,) or tr.s_next.shape != (spec.obs_dim,):
                    raise InvalidArgumentError(f"transition {k} has wrong observation shape")
                if tr.a.shape != (spec.act_dim,) or (tr.a_sampled is not None and tr.a_sampled.shape != tr.a.shape):
                    raise InvalidArgumentError(f"transition {k} has wrong action shape")
                if not 0 <= tr.t < spec.horizon:
                    raise InvalidArgumentError(f"transition {k} has step index {tr.t} outside the horizon")
            if k > 0 and not np.array_equal(self.transitions[k - 1].s_next, tr.s):
                raise InvalidArgumentError(f"transition {k} does not chain from transition {k - 1}")
        if spec is not None and len(self.transitions) > spec.horizon:
            raise InvalidArgumentError("trajectory longer than the horizon")


@dataclass(frozen=True)
class RewardParams:
    omega: float = 1.0
    v: float = 1.0
    alpha: float = 1e-5
    ctrl_penalty: float = 1e-3
    vel_penalty: float = 1e-3

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgumentError("Lorentzian offset alpha must be > 0")
        if min(self.omega, self.v, self.ctrl_penalty, self.vel_penalty) < 0:
            raise InvalidArgumentError("reward weights must be >= 0")


def lorentzian_reward(d, rp: RewardParams):
    """r(d) = -omega d^2 - v log(d^2 + alpha); accepts scalars or arrays."""
    d2 = np.square(d)
    value = -rp.omega * d2 - rp.v * np.log(d2 + rp.alpha)
    return float(value) if np.ndim(value) == 0 else value


class Environment(ABC):
    """Pure-function environment: observations double as states."""

    spec: EnvSpec

    @abstractmethod
    def reset(self, seed: int) -> np.ndarray:
        """Draw an initial observation from p0, deterministically per seed."""

    @abstractmethod
    def dynamics_batch(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Next observations for rows of (obs, already clipped actions)."""

    @abstractmethod
    def reward_batch(self, obs: np.ndarray, actions: np.ndarray, next_obs: np.ndarray) -> np.ndarray:
        """Rewards for rows of (obs, actions, next_obs)."""

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.spec.action_low, self.spec.action_high)

    def step(self, obs: Sequence[float], action: Sequence[float], t: int = 0) -> Tuple[np.ndarray, float, bool]:
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if obs.shape != (self.spec.obs_dim,) or action.shape != (self.spec.act_dim,):
            raise InvalidArgumentError(
                f"{self.spec.name}: got obs {obs.shape} and action {action.shape}")
        if not np.all(np.isfinite(action)):
            raise NumericError(f"{self.spec.name}: non-finite action {action}")
        action = self.clip_action(action)
        next_obs = self.dynamics_batch(obs[None, :], action[None, :])[0]
        reward = float(self.reward_batch(obs[None, :], action[None, :], next_obs[None, :])[0])
        return next_obs, reward, t + 1 >= self.spec.horizon

    def predict_batch(self, obs: np.ndarray, actions: np.ndarray, rng: np.random.Generator = None) -> np.ndarray:
        """Exact one-step prediction; lets the environment act as an oracle model."""
        return self.dynamics_batch(np.asarray(obs, dtype=np.float64), self.clip_action(np.asarray(actions)))


class Pendulum(Environment):
    gravity = 10.0
    mass = 1.0
    length = 1.0
    max_torque = 2.0
    max_speed = 8.0

    def __init__(self, horizon: int = 200, dt: float = 0.05):
        self.spec = EnvSpec("pendulum", obs_dim=3, act_dim=1, horizon=horizon, dt=dt,
                            action_low=(-self.max_torque,), action_high=(self.max_torque,))

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def dynamics_batch(self, obs, actions):
        theta = np.arctan2(obs[:, 1], obs[:, 0])
        theta_dot = obs[:, 2]
        u = actions[:, 0]
        g, m, l, dt = self.gravity, self.mass, self.length, self.spec.dt
        theta_ddot = 3.0 * g / (2.0 * l) * np.sin(theta) + 3.0 / (m * l * l) * u
        new_theta_dot = np.clip(theta_dot + theta_ddot * dt, -self.max_speed, self.max_speed)
        new_theta = theta + new_theta_dot * dt
        return np.stack([np.cos(new_theta), np.sin(new_theta), new_theta_dot], axis=1)

    def reward_batch(self, obs, actions, next_obs):
        theta = np.arctan2(obs[:, 1], obs[:, 0])
        return -(theta ** 2 + 0.1 * obs[:, 2] ** 2 + 0.001 * actions[:, 0] ** 2)

    def energy(self, obs: Sequence[float]) -> float:
        """Mechanical energy of the uniform rod, potential zero at the pivot."""
        obs = np.asarray(obs, dtype=np.float64)
        inertia = self.mass * self.length ** 2 / 3.0
        return float(0.5 * inertia * obs[2] ** 2 + self.mass * self.gravity * self.length / 2.0 * obs[0])


class Reacher(Environment):
    """
    Planar two-link arm with independent joint double integrators.

    obs = (q1, q2, q1_dot, q2_dot, x, y) where (x, y) is the fingertip.
    Reset: q1 ~ U[-pi, pi), q2 ~ U[-pi/2, pi/2), zero joint velocities.
    """

    link_lengths = (0.5, 0.5)
    target = (0.5, 0.5)
    torque_gain = 5.0
    damping = 1.0
    max_speed = 10.0

    def __init__(self, horizon: int = 200, dt: float = 0.05, reward_params: Optional[RewardParams] = None):
        self.reward_params = reward_params or RewardParams()
        self.spec = EnvSpec("reacher", obs_dim=6, act_dim=2, horizon=horizon, dt=dt,
                            action_low=(-1.0, -1.0), action_high=(1.0, 1.0))

    def fingertip(self, q: np.ndarray) -> np.ndarray:
        l1, l2 = self.link_lengths
        x = l1 * np.cos(q[:, 0]) + l2 * np.cos(q[:, 0] + q[:, 1])
        y = l1 * np.sin(q[:, 0]) + l2 * np.sin(q[:, 0] + q[:, 1])
        return np.stack([x, y], axis=1)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        q = np.array([[rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi / 2, math.pi / 2)]])
        return np.concatenate([q[0], np.zeros(2), self.fingertip(q)[0]])

    def dynamics_batch(self, obs, actions):
        q, q_dot = obs[:, 0:2], obs[:, 2:4]
        q_ddot = self.torque_gain * actions - self.damping * q_dot
        new_q_dot = np.clip(q_dot + q_ddot * self.spec.dt, -self.max_speed, self.max_speed)
        new_q = q + new_q_dot * self.spec.dt
        return np.concatenate([new_q, new_q_dot, self.fingertip(new_q)], axis=1)

    def distance(self, obs: np.ndarray) -> np.ndarray:
        return np.linalg.norm(obs[:, 4:6] - np.asarray(self.target), axis=1)

    def reward_batch(self, obs, actions, next_obs):
        rp = self.reward_params
        return (lorentzian_reward(self.distance(next_obs), rp)
                - rp.ctrl_penalty * np.sum(actions ** 2, axis=1)
                - rp.vel_penalty * np.sum(next_obs[:, 2:4] ** 2, axis=1))


class PointMass(Environment):
    """obs = (x, y, vx, vy); acceleration control; reset p ~ U[-1, 1]^2, v = 0."""

    def __init__(self, horizon: int = 200, dt: float = 0.05):
        self.spec = EnvSpec("point_mass", obs_dim=4, act_dim=2, horizon=horizon, dt=dt,
                            action_low=(-1.0, -1.0), action_high=(1.0, 1.0))

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def dynamics_batch(self, obs, actions):
        dt = self.spec.dt
        p, v = obs[:, 0:2], obs[:, 2:4]
        new_p = p + v * dt + 0.5 * actions * dt * dt
        new_v = v + actions * dt
        return np.concatenate([new_p, new_v], axis=1)

    def reward_batch(self, obs, actions, next_obs):
        return -(np.sum(obs[:, 0:2] ** 2, axis=1) + 0.1 * np.sum(obs[:, 2:4] ** 2, axis=1)
                 + 0.01 * np.sum(actions ** 2, axis=1))


ENVIRONMENTS = {
    "pendulum": Pendulum,
    "reacher": Reacher,
    "point_mass": PointMass,
}


def make_env(name: str, horizon: Optional[int] = None, dt: Optional[float] = None,
             reward_params: Optional[RewardParams] = None) -> Environment:
    if name not in ENVIRONMENTS:
        raise InvalidArgumentError(f"unknown environment '{name}'. Available: {sorted(ENVIRONMENTS)}")
    kwargs = {}
    if horizon is not None:
        kwargs["horizon"] = horizon
    if dt is not None:
        kwargs["dt"] = dt
    if reward_params is not None and name == "reacher":
        kwargs["reward_params"] = reward_params
    return ENVIRONMENTS[name](**kwargs)


def env_reset(env: Environment, seed: int) -> np.ndarray:
    return env.reset(seed)


def env_step(env: Environment, state: Sequence[float], action: Sequence[float],
             t: int = 0) -> Tuple[np.ndarray, float, bool]:
    return env.step(state, action, t)


class PacingMode(StrEnum):
    REALTIME = "realtime"
    VIRTUAL = "virtual"


def collect_rollout(env: Environment, policy_eval: PolicyFn, pacing: PacingMode = PacingMode.VIRTUAL,
                    env_seed: int = 0, speed_multiplier: float = 1.0,
                    sleep: Callable[[float], None] = time.sleep,
                    clock: Callable[[], float] = time.perf_counter) -> Trajectory:
    """
    Roll `policy_eval` for one episode of `env.spec.horizon` steps.

    In real-time pacing each step waits until its control period
    (dt / speed_multiplier) has elapsed; in virtual pacing nothing sleeps and
    the trajectory reports the nominal duration.
    """
    if speed_multiplier <= 0:
        raise InvalidArgumentError("speed_multiplier must be > 0")
    spec = env.spec
    period = spec.dt / speed_multiplier
    obs = env.reset(env_seed)
    transitions: List[Transition] = []
    total = 0.0
    start = clock()
    for t in range(spec.horizon):
        action = np.asarray(policy_eval(obs), dtype=np.float64)
        if action.shape != (spec.act_dim,):
            raise InvalidArgumentError(f"policy returned action of shape {action.shape}")
        if not np.all(np.isfinite(action)):
            raise NumericError(f"policy returned non-finite action at step {t}")
        next_obs, reward, done = env.step(obs, action, t)
        transitions.append(Transition(s=obs, a=env.clip_action(action), s_next=next_obs, r=reward, t=t,
                                      a_sampled=action))
        total += reward
        obs = next_obs
        if pacing is PacingMode.REALTIME:
            remaining = start + (t + 1) * period - clock()
            if remaining > 0:
                sleep(remaining)
        if done:
            break
    if pacing is PacingMode.REALTIME:
        duration = clock() - start
    else:
        duration = len(transitions) * period
    return Trajectory(transitions=transitions, return_undiscounted=total, env_seed=env_seed,
                      duration_s=duration)


def scripted_controller(env: Environment) -> PolicyFn:
    """Hand-designed near-optimal controller used to calibrate the solved threshold."""
    if isinstance(env, Pendulum):
        k_energy = 0.5
        g_term = 3.0 * env.gravity / (2.0 * env.length)

        def pendulum_control(obs: np.ndarray) -> np.ndarray:
            theta = math.atan2(obs[1], obs[0])
            theta_dot = obs[2]
            if abs(theta) < 0.5:
                u = -(10.0 * theta + 2.0 * theta_dot)
            else:
                energy = 0.5 * theta_dot ** 2 + g_term * (math.cos(theta) - 1.0)
                direction = 1.0 if theta_dot >= 0 else -1.0
                u = -k_energy * energy * direction
            return np.array([float(np.clip(u, -env.max_torque, env.max_torque))])

        return pendulum_control
    if isinstance(env, PointMass):
        def point_mass_control(obs: np.ndarray) -> np.ndarray:
            return np.clip(-2.0 * obs[0:2] - 2.5 * obs[2:4], -1.0, 1.0)

        return point_mass_control
    raise InvalidArgumentError(f"no scripted controller for '{env.spec.name}'")


_TRAJ_HEADER = struct.Struct("<IIIqdd")


def trajectory_to_bytes(traj: Trajectory) -> bytes:
    """
    Length-prefixed little-endian record stream.

    Header: count, obs_dim, act_dim (uint32), env_seed (int64), return and
    duration (float64). Each record: s, a, sampled a, s_next, r, t as float64.
    """
    if not traj.transitions:
        raise InvalidArgumentError("cannot serialize an empty trajectory")
    obs_dim = traj.transitions[0].s.shape[0]
    act_dim = traj.transitions[0].a.shape[0]
    header = _TRAJ_HEADER.pack(len(traj), obs_dim, act_dim, traj.env_seed, traj.return_undiscounted,
                               traj.duration_s)
    rows = np.stack([np.concatenate([tr.s, tr.a, tr.a if tr.a_sampled is None else tr.a_sampled, tr.s_next,
                                     [tr.r, float(tr.t)]]) for tr in traj.transitions])
    return header + rows.astype("<f8").tobytes()


def trajectory_from_bytes(data: bytes) -> Trajectory:
    if len(data) < _TRAJ_HEADER.size:
        raise InvalidArgumentError("truncated trajectory record")
    n, obs_dim, act_dim, env_seed, ret, duration = _TRAJ_HEADER.unpack_from(data, 0)
    width = 2 * obs_dim + 2 * act_dim + 2
    if len(data) != _TRAJ_HEADER.size + 8 * n * width:
        raise InvalidArgumentError("trajectory payload length does not match its header")
    rows = np.frombuffer(data, dtype="<f8", offset=_TRAJ_HEADER.size).reshape(n, width).astype(np.float64)
    transitions = [
        Transition(s=row[:obs_dim].copy(), a=row[obs_dim:obs_dim + act_dim].copy(),
                   s_next=row[obs_dim + 2 * act_dim:2 * obs_dim + 2 * act_dim].copy(),
                   r=float(row[-2]), t=int(row[-1]), a_sampled=row[obs_dim + act_dim:obs_dim + 2 * act_dim].copy())
        for row in rows
    ]
    return Trajectory(transitions=transitions, return_undiscounted=ret, env_seed=env_seed, duration_s=duration)
