#!/usr/bin/env python3
"""
Learning checks on the bundled presets: the runs have to actually solve the
tasks, against the threshold calibrated from the scripted controllers.
These take minutes; deselect them with -m "not slow".
"""
import math

import numpy as np
import pytest

from asyncdyna.config import parse_config
from asyncdyna.envs import make_env
from asyncdyna.evaluation import calibrate_threshold
from asyncdyna.harness import run_experiment
from asyncdyna.workers import execute_run
from run_presets import get_preset_config

pytestmark = pytest.mark.slow

PENDULUM_BUDGET = 200
SWEEP_OVERRIDES = ("run.seeds=0", "run.max_trajectories=40")


def trajectories_to_reach(run, threshold):
    """Trajectories at the first row at or above threshold, None if the run never gets there."""
    for row in run.rows:
        if row.avg_eval_return >= threshold:
            return row.trajectories
    return None


@pytest.fixture(scope="module")
def pendulum_threshold():
    return calibrate_threshold(make_env("pendulum"))


@pytest.fixture(scope="module")
def pendulum_compare(tmp_path_factory):
    result = run_experiment(parse_config(get_preset_config("pendulum_compare")),
                            tmp_path_factory.mktemp("pendulum_compare"))
    assert result.exit_code == 0, result.failures
    return result


def test_sync_pendulum_solves_within_budget(pendulum_compare, pendulum_threshold):
    runs = pendulum_compare.by_mode("sync")
    assert len(runs) == 4
    reached = [trajectories_to_reach(run, pendulum_threshold) for run in runs]
    assert sum(1 for r in reached if r is not None and r <= PENDULUM_BUDGET) >= 3


def test_async_pendulum_needs_no_more_trajectories_than_sync(pendulum_compare, pendulum_threshold):
    def mean_to_reach(mode):
        # a seed that never gets there counts at the budget
        reached = [trajectories_to_reach(run, pendulum_threshold) for run in pendulum_compare.by_mode(mode)]
        return float(np.mean([PENDULUM_BUDGET if r is None else r for r in reached]))

    assert mean_to_reach("async_virtual") <= 1.15 * mean_to_reach("sync")


@pytest.mark.parametrize("preset", ["partial_model_policy", "partial_policy_data"])
def test_partial_modes_solve_point_mass(preset):
    spec = parse_config(get_preset_config(preset), ["run.seeds=0"]).plan_runs()[0]
    threshold = calibrate_threshold(spec.make_env())
    metrics = execute_run(spec)
    assert trajectories_to_reach(metrics, threshold) is not None


def final_val_loss(preset):
    spec = parse_config(get_preset_config(preset), SWEEP_OVERRIDES).plan_runs()[0]
    metrics = execute_run(spec)
    assert metrics.rows[-1].trajectories == 40
    return metrics.rows[-1].model_val_loss


def test_early_stopping_ends_no_worse_than_training_without_it():
    without = final_val_loss("ema_sweep_off")
    assert math.isfinite(without)
    for preset in ("ema_sweep_06", "ema_sweep_09"):
        loss = final_val_loss(preset)
        # 5 % slack on the loss
        assert loss <= without + 0.05 * abs(without)
