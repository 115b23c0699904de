"""
Gaussian policy, value function and the PPO-clip improvement step.

The policy's flat parameter vector theta is the mean network's parameters
followed by the state-independent log standard deviation. Imagined batches
come from rolling the policy through anything exposing
`predict_batch(states, actions, rng)`: the dynamics ensemble, or an
environment acting as an exact oracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .envs import Trajectory
from .errors import InvalidArgumentError, NumericError
from .neural import (LOG_2PI, Activation, AdamState, MlpSpec, adam_step, backward_batch, forward_batch,
                     gaussian_log_density, gaussian_log_density_rows, init_params, params_from_bytes,
                     params_to_bytes)

logger = logging.getLogger(__name__)

LOG_STD_BOUNDS = (-5.0, 1.0)

RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class TransitionModel(Protocol):
    def predict_batch(self, S: np.ndarray, A: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    imagined_horizon: int = 50
    imagined_batch_paths: int = 32
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    entropy_coef: float = 0.0
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: Activation = Activation.TANH
    init_log_std: float = -0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidArgumentError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise InvalidArgumentError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if not 0.0 < self.clip_eps < 1.0:
            raise InvalidArgumentError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.imagined_horizon < 1 or self.imagined_batch_paths < 1:
            raise InvalidArgumentError("imagined horizon and batch size must be >= 1")
        if self.policy_lr < 0 or self.value_lr < 0 or self.entropy_coef < 0:
            raise InvalidArgumentError("learning rates and entropy_coef must be >= 0")


class GaussianPolicy:
    def __init__(self, spec: MlpSpec, params: np.ndarray, log_std: np.ndarray):
        if params.shape != (spec.num_params,):
            raise InvalidArgumentError("policy parameters do not match the mean network spec")
        if log_std.shape != (spec.output_dim,):
            raise InvalidArgumentError("log_std length must equal the action dimension")
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)
        self.log_std = np.clip(np.asarray(log_std, dtype=np.float64), *LOG_STD_BOUNDS)

    @classmethod
    def initial(cls, obs_dim: int, act_dim: int, config: TrainConfig, seed: int) -> "GaussianPolicy":
        spec = MlpSpec((obs_dim, *config.hidden_sizes, act_dim), config.activation)
        rng = np.random.default_rng(seed)
        return cls(spec, init_params(spec, rng), np.full(act_dim, config.init_log_std))

    @property
    def act_dim(self) -> int:
        return self.spec.output_dim

    def mean_batch(self, S: np.ndarray) -> np.ndarray:
        return forward_batch(self.spec, self.params, np.atleast_2d(S))[0]

    def mean(self, s: Sequence[float]) -> np.ndarray:
        return self.mean_batch(np.asarray(s, dtype=np.float64)[None, :])[0]

    def log_prob_batch(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        return gaussian_log_density_rows(self.mean_batch(S), self.log_std, A)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params, self.log_std])

    def with_flat(self, theta: np.ndarray) -> "GaussianPolicy":
        n = self.spec.num_params
        return GaussianPolicy(self.spec, theta[:n].copy(), theta[n:].copy())

    def to_bytes(self) -> bytes:
        return params_to_bytes(self.params) + params_to_bytes(self.log_std)

    def with_bytes(self, data: bytes, offset: int = 0) -> Tuple["GaussianPolicy", int]:
        params, offset = params_from_bytes(data, offset)
        log_std, offset = params_from_bytes(data, offset)
        return GaussianPolicy(self.spec, params, log_std), offset


class ValueFunction:
    def __init__(self, spec: MlpSpec, params: np.ndarray):
        if spec.output_dim != 1:
            raise InvalidArgumentError("value network must have a single output")
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)

    @classmethod
    def initial(cls, obs_dim: int, config: TrainConfig, seed: int) -> "ValueFunction":
        spec = MlpSpec((obs_dim, *config.hidden_sizes, 1), config.activation)
        return cls(spec, init_params(spec, np.random.default_rng(seed)))

    def value_batch(self, S: np.ndarray) -> np.ndarray:
        return forward_batch(self.spec, self.params, np.atleast_2d(S))[0][:, 0]


def sample_action(policy: GaussianPolicy, s: Sequence[float], rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """a = mean(s) + exp(log_std) * z with z ~ N(0, I)."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise NumericError("cannot act on a non-finite state")
    mean = policy.mean(s)
    a = mean + np.exp(policy.log_std) * rng.standard_normal(policy.act_dim)
    return a, gaussian_log_density(mean, policy.log_std, a)


def sample_actions(policy: GaussianPolicy, S: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    mean = policy.mean_batch(S)
    A = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
    return A, gaussian_log_density_rows(mean, policy.log_std, A)


@dataclass
class ImaginedBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    truncated_paths: int = 0
    path_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.states.shape[0]


def compute_gae(rewards: Sequence[float], values: Sequence[float], bootstrap_value: float, gamma: float,
                gae_lambda: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and the matching value targets."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise InvalidArgumentError("rewards and values must be aligned")
    next_values = np.append(values[1:], bootstrap_value)
    deltas = rewards + gamma * next_values - values
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in range(deltas.shape[0] - 1, -1, -1):
        running = deltas[t] + gamma * gae_lambda * running
        advantages[t] = running
    return advantages, advantages + values


def standardize(advantages: np.ndarray) -> np.ndarray:
    centered = advantages - advantages.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def _assemble(paths: List[Dict[str, np.ndarray]], value_fn: ValueFunction, config: TrainConfig,
              truncated: int) -> ImaginedBatch:
    keys = ("states", "actions", "rewards", "next_states", "log_probs")
    advantages, targets = [], []
    for path in paths:
        values = value_fn.value_batch(path["states"])
        bootstrap = float(value_fn.value_batch(path["next_states"][-1:])[0])
        adv, tgt = compute_gae(path["rewards"], values, bootstrap, config.gamma, config.gae_lambda)
        advantages.append(adv)
        targets.append(tgt)
    if not paths:
        raise NumericError("every imagined path was truncated")
    merged = {k: np.concatenate([p[k] for p in paths]) for k in keys}
    return ImaginedBatch(
        states=merged["states"], actions=merged["actions"], rewards=merged["rewards"],
        next_states=merged["next_states"], old_log_probs=merged["log_probs"],
        advantages=standardize(np.concatenate(advantages)), value_targets=np.concatenate(targets),
        truncated_paths=truncated, path_returns=np.array([p["rewards"].sum() for p in paths]))


def imagine_rollouts(policy: GaussianPolicy, value_fn: ValueFunction, model: TransitionModel,
                     init_states: np.ndarray, reward_fn: RewardFn, config: TrainConfig,
                     rng: np.random.Generator, horizon: Optional[int] = None,
                     action_bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None) -> ImaginedBatch:
    """
    Roll the policy through `model` from each initial state.

    Sampled actions are clipped to `action_bounds` before they reach the model
    and the reward, matching how the real environment treats them; the stored
    log-probabilities refer to the unclipped samples.

    A path whose prediction turns non-finite is truncated before that step
    and counted in `truncated_paths`.
    """
    horizon = config.imagined_horizon if horizon is None else horizon
    if horizon < 1:
        raise InvalidArgumentError("imagined horizon must be >= 1")
    S = np.array(init_states, dtype=np.float64, ndmin=2)
    n_paths = S.shape[0]
    steps: Dict[str, List[np.ndarray]] = {k: [] for k in ("states", "actions", "rewards", "next_states", "log_probs")}
    alive = np.ones(n_paths, dtype=bool)
    lengths = np.zeros(n_paths, dtype=int)
    truncated = 0
    for _ in range(horizon):
        A, logp = sample_actions(policy, S, rng)
        applied = A if action_bounds is None else np.clip(A, *action_bounds)
        S_next = model.predict_batch(S, applied, rng)
        rewards = np.asarray(reward_fn(S, applied, S_next), dtype=np.float64)
        finite = np.all(np.isfinite(S_next), axis=1) & np.isfinite(rewards)
        newly_dead = alive & ~finite
        truncated += int(newly_dead.sum())
        alive &= finite
        lengths += alive
        for key, value in (("states", S), ("actions", A), ("rewards", rewards), ("next_states", S_next),
                           ("log_probs", logp)):
            steps[key].append(value)
        if not alive.any():
            break
        S = np.where(alive[:, None], S_next, S)
    if truncated:
        logger.warning("imagined rollouts truncated %d of %d paths on non-finite predictions", truncated, n_paths)
    stacked = {k: np.stack(v, axis=1) for k, v in steps.items()}
    paths = []
    for p in range(n_paths):
        n = lengths[p]
        if n == 0:
            continue
        paths.append({k: stacked[k][p, :n] for k in stacked})
    return _assemble(paths, value_fn, config, truncated)


def batch_from_trajectories(policy: GaussianPolicy, value_fn: ValueFunction, trajectories: Sequence[Trajectory],
                            config: TrainConfig) -> ImaginedBatch:
    """Build a PPO batch from real trajectories (model-free baseline)."""
    paths = []
    for traj in trajectories:
        S, A = traj.states, traj.sampled_actions
        paths.append({"states": S, "actions": A, "rewards": traj.rewards, "next_states": traj.next_states,
                      "log_probs": policy.log_prob_batch(S, A)})
    return _assemble(paths, value_fn, config, truncated=0)


def clipped_surrogate(ratio, advantage, clip_eps: float):
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A), elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    value = np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)
    return float(value) if value.ndim == 0 else value


def entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def surrogate_objective(policy: GaussianPolicy, batch: ImaginedBatch, clip_eps: float,
                        entropy_coef: float = 0.0) -> Tuple[float, np.ndarray, Dict[str, float]]:
    """
    The PPO objective to maximize and its exact gradient w.r.t. the flat theta.
    """
    mean, cache = forward_batch(policy.spec, policy.params, batch.states)
    log_std = policy.log_std
    inv_std = np.exp(-log_std)
    z = (batch.actions - mean) * inv_std
    log_prob = gaussian_log_density_rows(mean, log_std, batch.actions)
    ratio = np.exp(log_prob - batch.old_log_probs)
    adv = batch.advantages
    n = ratio.shape[0]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    objective = float(np.mean(np.minimum(unclipped, clipped))) + entropy_coef * entropy(log_std)
    active = unclipped <= clipped
    coef = np.where(active, adv, 0.0) * ratio / n
    d_mean = coef[:, None] * z * inv_std
    d_params, _ = backward_batch(policy.spec, policy.params, cache, d_mean)
    d_log_std = np.sum(coef[:, None] * (z * z - 1.0), axis=0) + entropy_coef
    info = {
        "clip_fraction": float(np.mean(~active)),
        "approx_kl": float(np.mean(batch.old_log_probs - log_prob)),
    }
    return objective, np.concatenate([d_params, d_log_std]), info


@dataclass
class PPOOptimizers:
    policy: AdamState
    value: AdamState

    @classmethod
    def fresh(cls, policy: GaussianPolicy, value_fn: ValueFunction, config: TrainConfig) -> "PPOOptimizers":
        return cls(policy=AdamState.fresh(policy.flat().shape[0], lr=config.policy_lr),
                   value=AdamState.fresh(value_fn.params.shape[0], lr=config.value_lr))


def ppo_update(policy: GaussianPolicy, value_fn: ValueFunction, batch: ImaginedBatch, config: TrainConfig,
               optimizers: PPOOptimizers) -> Tuple[GaussianPolicy, ValueFunction, Dict[str, object]]:
    """
    Exactly one Adam step on the clipped surrogate and one on the value MSE.

    A non-finite objective skips both steps and is reported in the stats.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("ppo_update needs a non-empty batch")
    objective, grad, info = surrogate_objective(policy, batch, config.clip_eps, config.entropy_coef)
    values, cache = forward_batch(value_fn.spec, value_fn.params, batch.states)
    residual = values[:, 0] - batch.value_targets
    value_loss = float(np.mean(residual ** 2))
    stats: Dict[str, object] = {"surrogate": objective, "value_loss": value_loss,
                                "entropy": entropy(policy.log_std), "skipped": False, "error": None, **info}
    if not (math.isfinite(objective) and math.isfinite(value_loss)
            and np.all(np.isfinite(grad))):
        stats.update(skipped=True, error="non-finite policy or value loss")
        return policy, value_fn, stats
    theta, optimizers.policy = adam_step(optimizers.policy, policy.flat(), -grad)
    value_grad, _ = backward_batch(value_fn.spec, value_fn.params, cache,
                                   (2.0 * residual / residual.shape[0])[:, None])
    value_params, optimizers.value = adam_step(optimizers.value, value_fn.params, value_grad)
    return policy.with_flat(theta), ValueFunction(value_fn.spec, value_params), stats


def discounted_return(trajectory: Trajectory, gamma: float) -> float:
    rewards = trajectory.rewards
    if rewards.shape[0] == 0:
        raise InvalidArgumentError("discounted_return needs a non-empty trajectory")
    return float(np.sum(rewards * gamma ** np.arange(rewards.shape[0])))
