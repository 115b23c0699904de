#!/usr/bin/env python3
"""
Tests for the learning-curve SVG plots
"""
import math
import xml.etree.ElementTree as ET

import pytest

from asyncdyna.errors import InvalidArgumentError
from asyncdyna.metrics import MetricsRow, RunMetrics
from asyncdyna.plotting import emit_plot, line_style, plot_series


def write_run(tmp_path, mode, seed, trajectories, returns):
    rows = [
        MetricsRow(env="point_mass", mode=mode, seed=seed, wall_clock_s=1.5 * t, virtual_time_s=1.5 * t,
                   real_env_steps=10 * t, trajectories=t, avg_eval_return=r, std_eval_return=0.0,
                   model_val_loss=math.nan, model_version=t, policy_version=t, imagined_steps=0)
        for t, r in zip(trajectories, returns)
    ]
    return RunMetrics("point_mass", mode, seed, rows).write_csv(tmp_path / f"point_mass_{mode}_seed{seed}.csv")


def test_line_styles_per_mode():
    assert line_style("async_virtual") == "-"
    assert line_style("async_realtime") == "-"
    assert line_style("model_free") == ":"
    assert line_style("sync") == "--"
    assert line_style("partial_policy_data") == "--"


def test_series_grouped_by_mode(tmp_path):
    paths = [write_run(tmp_path, "async_virtual", 0, [1, 2, 4], [-50.0, -30.0, -10.0]),
             write_run(tmp_path, "async_virtual", 1, [1, 2, 4], [-40.0, -20.0, -10.0]),
             write_run(tmp_path, "sync", 0, [1, 2, 3], [-60.0, -50.0, -40.0])]
    runs = [RunMetrics.read_csv(p) for p in paths]
    series = plot_series(runs, "samples")
    assert [s.label for s in series] == ["point_mass async_virtual (n=2)", "point_mass sync (n=1)"]
    assert series[0].x.max() == 4.0
    assert series[0].mean.tolist() == pytest.approx([-45.0, -25.0, -10.0])
    assert series[1].linestyle == "--"
    wall = plot_series(runs, "wall_clock")
    assert wall[0].x.max() == pytest.approx(6.0)


def test_emit_plot_is_valid_svg(tmp_path):
    paths = [write_run(tmp_path, "async_virtual", 0, [1, 2, 4], [-50.0, -30.0, -10.0]),
             write_run(tmp_path, "model_free", 0, [1, 2, 4], [-80.0, -70.0, -60.0])]
    for axis in ("samples", "wall_clock"):
        svg = emit_plot(paths, axis)
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")


def test_emit_plot_rejects_bad_input(tmp_path):
    with pytest.raises(InvalidArgumentError):
        emit_plot([])
    path = write_run(tmp_path, "sync", 0, [1, 2], [0.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        emit_plot([path], "episodes")
    empty = tmp_path / "empty.csv"
    empty.write_text("env,mode\n")
    with pytest.raises(InvalidArgumentError):
        emit_plot([empty])
