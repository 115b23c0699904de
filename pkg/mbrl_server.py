"""
MCP server for asyncdyna experiments.

Exposes experiment runs, run comparison, plotting and the Lorentzian reward
as MCP tools, plus the run modes and presets as resources. Every tool
returns a JSON document with a "status" of "success" or "error".
"""
import json
import logging
import os
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from mcp.server.fastmcp import FastMCP

from asyncdyna.config import parse_config
from asyncdyna.envs import RewardParams, lorentzian_reward as reward_value
from asyncdyna.errors import ConfigError
from asyncdyna.harness import comparison_table, compare_summary, run_experiment
from asyncdyna.metrics import RunMetrics
from asyncdyna.plotting import emit_plot
from asyncdyna.workers import RunMode
from run_presets import EXPERIMENT_PRESETS, get_preset_config, list_presets as preset_entries

load_dotenv()
logging.basicConfig(level=getattr(logging, os.environ.get("ASYNCDYNA_LOG_LEVEL", "INFO").upper(), logging.INFO))
logger = logging.getLogger(__name__)

mcp = FastMCP("asyncdyna experiments")

DEFAULT_OUTPUT_DIR = os.environ.get("ASYNCDYNA_OUTPUT_DIR", "results")

RUN_MODE_DESCRIPTIONS = {
    RunMode.ASYNC_REALTIME: "Three concurrent workers; data collection paced in real time",
    RunMode.ASYNC_VIRTUAL: "Three workers under the deterministic virtual-time scheduler",
    RunMode.SYNC: "Collect N rollouts, fit the model to early stop, take G policy steps; repeat",
    RunMode.PARTIAL_MODEL_POLICY: "Collect N rollouts, then alternate E model epochs and G policy steps",
    RunMode.PARTIAL_POLICY_DATA: "Fit the model, then N times take G policy steps and collect one rollout",
    RunMode.MODEL_FREE: "PPO on real rollouts only",
}


def _error(message: str, **extra) -> str:
    return json.dumps({"status": "error", "error": message, **extra}, indent=2)


def _execute(config_text: str, output_dir: str, overrides: Optional[List[str]]) -> str:
    try:
        config = parse_config(config_text, overrides or [])
    except ConfigError as e:
        return _error(str(e), key=e.key, line=e.line)

    result = run_experiment(config, Path(output_dir))
    runs = [
        {"env": run.env, "mode": run.mode, "seed": run.seed, "summary": run.summary}
        for run in result.runs
    ]
    payload = {
        "status": "success" if result.runs and not result.failures else "error",
        "exit_code": result.exit_code,
        "runs": runs,
        "failures": result.failures,
        "files": [str(p) for p in result.files],
    }
    if result.comparison:
        payload["comparison"] = comparison_table(result.comparison)
    return json.dumps(payload, indent=2, default=float)


@mcp.tool()
def run_preset(preset_name: str, output_dir: str = DEFAULT_OUTPUT_DIR, overrides: Optional[List[str]] = None) -> str:
    """
    Run a named experiment preset and write its CSVs

    Args:
        preset_name: Name of the preset (see list_presets)
        output_dir: Directory for the run CSVs
        overrides: Optional 'section.key=value' overrides
    """
    if preset_name not in EXPERIMENT_PRESETS:
        return _error(f"Preset '{preset_name}' not found. Available: {list(EXPERIMENT_PRESETS.keys())}")
    logger.info("running preset %s", preset_name)
    try:
        return _execute(get_preset_config(preset_name), output_dir, overrides)
    except Exception as e:
        logger.exception("preset %s failed", preset_name)
        return _error(str(e))


@mcp.tool()
def run_config(config_text: str, output_dir: str = DEFAULT_OUTPUT_DIR, overrides: Optional[List[str]] = None) -> str:
    """
    Run an experiment from config text (key = value lines with [section] headers)
    """
    try:
        return _execute(config_text, output_dir, overrides)
    except Exception as e:
        logger.exception("config run failed")
        return _error(str(e))


@mcp.tool()
def compare_runs(csv_path: str, reference_csv_path: str) -> str:
    """
    Compare a run CSV against a reference run CSV (usually sync)
    """
    try:
        rows = compare_summary([RunMetrics.read_csv(Path(csv_path))], [RunMetrics.read_csv(Path(reference_csv_path))])
        return json.dumps({
            "status": "success",
            "table": comparison_table(rows),
            "rows": [row.__dict__ for row in rows],
        }, indent=2)
    except Exception as e:
        return _error(str(e))


@mcp.tool()
def plot_runs(csv_paths: List[str], out_path: str, axis: str = "samples") -> str:
    """
    Plot learning curves from run CSVs into an SVG file

    Args:
        csv_paths: Run CSV files
        out_path: Where to write the SVG
        axis: 'samples' (trajectories) or 'wall_clock'
    """
    try:
        svg = emit_plot([Path(p) for p in csv_paths], axis)
        Path(out_path).write_text(svg)
        return json.dumps({"status": "success", "out_path": out_path, "bytes": len(svg)}, indent=2)
    except Exception as e:
        return _error(str(e))


@mcp.tool()
def lorentzian_reward(distance: float, omega: float = 1.0, v: float = 1.0, alpha: float = 1e-5) -> str:
    """
    Lorentzian distance reward r(d) = -omega d^2 - v log(d^2 + alpha)
    """
    try:
        value = reward_value(distance, RewardParams(omega=omega, v=v, alpha=alpha))
        return json.dumps({"status": "success", "distance": distance, "reward": value}, indent=2)
    except Exception as e:
        return _error(str(e))


@mcp.tool()
def list_presets() -> str:
    """
    List all available experiment presets
    """
    entries = preset_entries()
    return json.dumps({"status": "success", "total_presets": len(entries), "presets": entries}, indent=2)


@mcp.resource("asyncdyna://run-modes")
def run_modes_resource() -> str:
    """
    Run modes and what each one schedules
    """
    return json.dumps({
        "title": "asyncdyna run modes",
        "modes": {mode.value: text for mode, text in RUN_MODE_DESCRIPTIONS.items()},
    }, indent=2)


@mcp.resource("asyncdyna://presets")
def presets_resource() -> str:
    """
    Preset experiment configurations, rendered as config text
    """
    return json.dumps({
        "title": "asyncdyna experiment presets",
        "presets": {name: get_preset_config(name) for name in EXPERIMENT_PRESETS},
    }, indent=2)


if __name__ == "__main__":
    import sys
    transport = "stdio"
    for arg in sys.argv[1:]:
        if arg == "--sse":
            transport = "sse"
            break
        elif arg == "--stdio":
            transport = "stdio"
            break

    logger.info("Running with transport: %s", transport)
    mcp.run(transport=transport)
