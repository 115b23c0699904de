#!/usr/bin/env python3
"""
Tests for aggregation, the comparison table, evaluation and full experiment runs
"""
import csv
import math

import numpy as np
import pytest

from asyncdyna.config import parse_config
from asyncdyna.envs import make_env, scripted_controller
from asyncdyna.evaluation import calibrate_threshold, evaluate_controller, evaluate_policy, solved_threshold
from asyncdyna.harness import (aggregate, aggregate_csv_text, comparison_csv_text, comparison_table,
                               compare_summary, run_experiment, run_file_stem)
from asyncdyna.metrics import CSV_COLUMNS, MetricsRow, RunMetrics
from asyncdyna.policy import GaussianPolicy, TrainConfig

TINY_EXPERIMENT = """
[run]
env = point_mass
mode = async_virtual
compare_mode = sync
max_trajectories = 2
seeds = 0, 1
max_epochs_per_iteration = 3

[env]
horizon = 10

[train]
hidden_sizes = 8
imagined_horizon = 5
imagined_batch_paths = 4

[ensemble]
k = 2
hidden_sizes = 8
capacity_trajectories = 5
start_states = 50

[ablation]
g = 2

[cost]
epoch_duration = 0.05
grad_step_duration = 0.01

[eval]
every = 1
episodes = 1
"""


def make_run(mode, trajectories, returns, seed=0, env="pendulum", wall_per_trajectory=2.0):
    rows = [
        MetricsRow(env=env, mode=mode, seed=seed, wall_clock_s=t * wall_per_trajectory,
                   virtual_time_s=t * wall_per_trajectory, real_env_steps=t * 200, trajectories=t,
                   avg_eval_return=r, std_eval_return=0.0, model_val_loss=math.nan, model_version=0,
                   policy_version=t, imagined_steps=0)
        for t, r in zip(trajectories, returns)
    ]
    return RunMetrics(env=env, mode=mode, seed=seed, rows=rows)


def test_aggregate_mean_and_std():
    runs = [make_run("sync", [1, 2, 3], [0.0, 10.0, 20.0]), make_run("sync", [1, 2, 3], [10.0, 20.0, 30.0], seed=1)]
    grid, mean, std = aggregate(runs, "samples")
    assert grid.tolist() == [1.0, 2.0, 3.0]
    assert mean.tolist() == pytest.approx([5.0, 15.0, 25.0])
    assert std.tolist() == pytest.approx([5.0, 5.0, 5.0])


def test_aggregate_interpolates_on_common_range():
    runs = [make_run("sync", [1, 3], [0.0, 20.0]), make_run("sync", [2, 4], [0.0, 0.0], seed=1)]
    grid, mean, _ = aggregate(runs, "samples")
    assert grid.tolist() == [2.0, 3.0]
    assert mean.tolist() == pytest.approx([5.0, 10.0])
    wall_grid, _, _ = aggregate(runs, "wall_clock")
    assert wall_grid.tolist() == [4.0, 6.0]
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_csv_covers_both_axes():
    text = aggregate_csv_text([make_run("sync", [1, 2], [1.0, 2.0])])
    rows = list(csv.DictReader(text.splitlines()))
    assert {r["axis"] for r in rows} == {"wall_clock", "samples"}
    assert rows[0]["runs"] == "1"


def test_identical_runs_compare_as_equal():
    run = make_run("sync", [20, 40, 60], [-300.0, -200.0, -100.0])
    [row] = compare_summary([run], [run])
    assert row.threshold == pytest.approx(-110.0)
    assert row.sample_efficiency_ratio == pytest.approx(1.0)
    assert row.wall_clock_ratio == pytest.approx(1.0)


def test_faster_run_has_ratio_above_one():
    ours = make_run("async_virtual", [20, 40], [-200.0, -105.0])
    reference = make_run("sync", [20, 40, 60], [-300.0, -200.0, -100.0])
    [row] = compare_summary([ours], [reference])
    assert row.trajectories_to_threshold == 40
    assert row.reference_trajectories_to_threshold == 60
    assert row.sample_efficiency_ratio == pytest.approx(1.5)
    assert row.wall_clock_ratio == pytest.approx(1.5)
    assert "async_virtual" in comparison_table([row])
    header = comparison_csv_text([row]).splitlines()[0]
    assert header.startswith("env,mode,reference_mode")


def test_run_that_never_reaches_threshold():
    ours = make_run("async_virtual", [20, 40], [-500.0, -400.0])
    reference = make_run("sync", [20, 40], [-300.0, -100.0])
    [row] = compare_summary([ours], [reference])
    assert math.isnan(row.trajectories_to_threshold)
    assert math.isnan(row.sample_efficiency_ratio)


def test_solved_threshold_handles_sign():
    assert solved_threshold(-100.0) == pytest.approx(-110.0)
    assert solved_threshold(100.0) == pytest.approx(90.0)


def test_evaluate_policy_is_deterministic():
    env = make_env("point_mass", horizon=20)
    policy = GaussianPolicy.initial(4, 2, TrainConfig(hidden_sizes=(8,)), seed=0)
    assert evaluate_policy(env, policy, 3, seed=1) == evaluate_policy(env, policy, 3, seed=1)


def test_scripted_pendulum_controller_beats_doing_nothing():
    env = make_env("pendulum")
    scripted, _ = evaluate_controller(env, scripted_controller(env), 5, seed=0)
    idle, _ = evaluate_controller(env, lambda obs: np.zeros(1), 5, seed=0)
    assert scripted > idle
    assert calibrate_threshold(env, 5, seed=0) < scripted


def test_run_experiment_writes_every_file(tmp_path):
    config = parse_config(TINY_EXPERIMENT)
    result = run_experiment(config, tmp_path)
    assert result.exit_code == 0
    assert result.failures == {}
    assert len(result.runs) == 4
    for mode in ("async_virtual", "sync"):
        for seed in (0, 1):
            stem = run_file_stem("point_mass", mode, seed)
            run_csv = tmp_path / f"{stem}.csv"
            assert run_csv.exists()
            assert (tmp_path / f"{stem}.events.csv").exists()
            with open(run_csv, newline="") as fh:
                reader = csv.reader(fh)
                assert tuple(next(reader)) == CSV_COLUMNS
                rows = list(reader)
            assert rows[-1][CSV_COLUMNS.index("trajectories")] == "2"
        assert (tmp_path / f"point_mass_{mode}_aggregate.csv").exists()
    assert (tmp_path / "point_mass_comparison.csv").exists()
    assert len(result.comparison) == 1
    assert len(result.files) == 11

    reread = RunMetrics.read_csv(tmp_path / "point_mass_sync_seed0.csv")
    assert reread.mode == "sync"
    assert reread.rows[-1].trajectories == 2


def test_runs_that_miss_threshold_count_at_budget():
    ours = [make_run("async_virtual", [20, 40], [-200.0, -105.0]),
            make_run("async_virtual", [20, 40, 60, 80], [-500.0, -450.0, -400.0, -350.0], seed=1)]
    reference = [make_run("sync", [20, 40, 60], [-300.0, -200.0, -100.0]),
                 make_run("sync", [20, 40, 60], [-300.0, -200.0, -100.0], seed=1)]
    [row] = compare_summary(ours, reference)
    assert row.threshold == pytest.approx(-110.0)
    assert row.reached == "1/2"
    assert row.reference_reached == "2/2"
    # seed 1 never reaches -110 and counts at its budget of 80
    assert row.trajectories_to_threshold == pytest.approx(60.0)
    assert row.wall_clock_to_threshold == pytest.approx(120.0)
    assert row.sample_efficiency_ratio == pytest.approx(1.0)
    assert "1/2" in comparison_table([row])
    header, line = comparison_csv_text([row]).splitlines()
    assert header.endswith("reached,reference_reached")
    assert line.endswith("1/2,2/2")


def test_no_reaching_run_reports_zero_reached():
    ours = make_run("async_virtual", [20, 40], [-500.0, -400.0])
    reference = make_run("sync", [20, 40], [-300.0, -100.0])
    [row] = compare_summary([ours], [reference])
    assert row.reached == "0/1"
    assert math.isnan(row.wall_clock_to_threshold)
