"""Deterministic policy evaluation and the solved-threshold calibration."""

from __future__ import annotations

import logging
from typing import Callable, Tuple

import numpy as np

from .envs import Environment, PacingMode, collect_rollout, scripted_controller
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

EVAL_SEED_SALT = 7919


def eval_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, EVAL_SEED_SALT, episode]).generate_state(1)[0])


def rollout_seed(seed: int, index: int) -> int:
    """Environment seed of the index-th training rollout of a run; independent of the run mode."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate_controller(env: Environment, controller: Callable[[np.ndarray], np.ndarray], episodes: int,
                        seed: int) -> Tuple[float, float]:
    if episodes < 1:
        raise InvalidArgumentError("evaluation needs at least one episode")
    returns = [collect_rollout(env, controller, PacingMode.VIRTUAL, env_seed=eval_seed(seed, i)).return_undiscounted
               for i in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


def evaluate_policy(env: Environment, policy, episodes: int, seed: int) -> Tuple[float, float]:
    """Undiscounted mean/std return of the policy's mean action from seeded resets, unpaced."""
    return evaluate_controller(env, policy.mean, episodes, seed)


def solved_threshold(reference_return: float, fraction: float = 0.9) -> float:
    """`fraction` of a reference return, measured so that it also works for negative returns."""
    return reference_return - (1.0 - fraction) * abs(reference_return)


def calibrate_threshold(env: Environment, episodes: int = 5, seed: int = 0) -> float:
    mean, _ = evaluate_controller(env, scripted_controller(env), episodes, seed)
    threshold = solved_threshold(mean)
    logger.info("%s scripted controller return %.3f, solved threshold %.3f", env.spec.name, mean, threshold)
    return threshold
