"""
Experiment harness: seeded multi-run execution, CSV output, cross-seed
aggregation and the mode-versus-mode comparison table.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .evaluation import evaluate_policy, solved_threshold
from .metrics import RunMetrics, format_float
from .scheduler import CostModel
from .workers import RunMode, RunSpec, calibrate_cost_model, execute_run

logger = logging.getLogger(__name__)

__all__ = ["AXES", "ComparisonRow", "ExperimentResult", "aggregate", "compare_summary", "evaluate_policy",
           "run_experiment", "run_file_stem"]

AXES = {"wall_clock": "wall_clock_s", "samples": "trajectories"}

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def run_file_stem(env: str, mode: str, seed: int) -> str:
    return f"{env}_{mode}_seed{seed}"


def aggregate(runs: Sequence[RunMetrics], axis: str = "samples") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and std of the eval return across runs on a shared abscissa.

    The grid is every abscissa any run logged inside the range all runs
    cover; each run is linearly interpolated onto it.
    """
    if not runs:
        raise ValueError("aggregate needs at least one run")
    column = AXES[axis]
    curves = []
    for run in runs:
        x = np.asarray(run.column(column), dtype=np.float64)
        y = np.asarray(run.column("avg_eval_return"), dtype=np.float64)
        if x.size == 0:
            raise ValueError(f"run {run.mode}/{run.seed} has no rows")
        curves.append((x, y))
    lo = max(x[0] for x, _ in curves)
    hi = min(x[-1] for x, _ in curves)
    grid = np.unique(np.concatenate([x[(x >= lo) & (x <= hi)] for x, _ in curves]))
    if grid.size == 0:
        grid = np.array([hi])
    values = np.stack([np.interp(grid, x, y) for x, y in curves])
    return grid, values.mean(axis=0), values.std(axis=0)


def aggregate_csv_text(runs: Sequence[RunMetrics]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["axis", "x", "mean_eval_return", "std_eval_return", "runs"])
    for axis in AXES:
        grid, mean, std = aggregate(runs, axis)
        for x, m, s in zip(grid, mean, std):
            writer.writerow([axis, format_float(x), format_float(m), format_float(s), len(runs)])
    return out.getvalue()


@dataclass
class ComparisonRow:
    env: str
    mode: str
    reference_mode: str
    final_return: float
    reference_final_return: float
    threshold: float
    trajectories_to_threshold: float
    reference_trajectories_to_threshold: float
    wall_clock_to_threshold: float
    reference_wall_clock_to_threshold: float
    sample_efficiency_ratio: float
    wall_clock_ratio: float
    # runs that reached the threshold, "k/n"
    reached: str = ""
    reference_reached: str = ""


def _final_return(runs: Sequence[RunMetrics]) -> float:
    return float(np.mean([run.rows[-1].avg_eval_return for run in runs]))


def _first_reach(runs: Sequence[RunMetrics], threshold: float) -> Tuple[float, float, int]:
    """
    Mean (trajectories, wall_clock_s) to the first row at or above threshold,
    and how many runs reached it.

    A run that never reaches the threshold counts at its budget, its last
    row, so the means are lower bounds whenever reached < len(runs). Both
    means are NaN when no run reaches it.
    """
    hits, reached = [], 0
    for run in runs:
        hit = next((row for row in run.rows if row.avg_eval_return >= threshold), None)
        if hit is not None:
            reached += 1
        elif run.rows:
            hit = run.rows[-1]
        else:
            continue
        hits.append((hit.trajectories, hit.wall_clock_s))
    if reached == 0:
        return math.nan, math.nan, 0
    return float(np.mean([h[0] for h in hits])), float(np.mean([h[1] for h in hits])), reached


def _ratio(reference: float, value: float) -> float:
    if math.isnan(reference) or math.isnan(value) or value == 0:
        return math.nan
    return reference / value


def compare_summary(metrics: Sequence[RunMetrics], reference: Sequence[RunMetrics]) -> List[ComparisonRow]:
    """
    Compare runs against reference runs (usually sync) per environment.

    The threshold is 90 % of the reference's final return; ratios above 1
    mean `metrics` got there with fewer trajectories / less time.
    """
    if not metrics or not reference:
        raise ValueError("compare_summary needs runs on both sides")
    rows = []
    for env in sorted({run.env for run in reference}):
        ours = [run for run in metrics if run.env == env]
        theirs = [run for run in reference if run.env == env]
        if not ours:
            continue
        reference_final = _final_return(theirs)
        threshold = solved_threshold(reference_final, 0.9)
        traj, wall, reached = _first_reach(ours, threshold)
        ref_traj, ref_wall, ref_reached = _first_reach(theirs, threshold)
        rows.append(ComparisonRow(
            env=env, mode=ours[0].mode, reference_mode=theirs[0].mode, final_return=_final_return(ours),
            reference_final_return=reference_final, threshold=threshold, trajectories_to_threshold=traj,
            reference_trajectories_to_threshold=ref_traj, wall_clock_to_threshold=wall,
            reference_wall_clock_to_threshold=ref_wall, sample_efficiency_ratio=_ratio(ref_traj, traj),
            wall_clock_ratio=_ratio(ref_wall, wall), reached=f"{reached}/{len(ours)}",
            reference_reached=f"{ref_reached}/{len(theirs)}"))
    return rows


def comparison_csv_text(rows: Sequence[ComparisonRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    names = [f.name for f in fields(ComparisonRow)]
    writer.writerow(names)
    for row in rows:
        values = asdict(row)
        writer.writerow([format_float(values[n]) if isinstance(values[n], float) else values[n] for n in names])
    return out.getvalue()


def comparison_table(rows: Sequence[ComparisonRow]) -> str:
    """Aligned plain-text rendering of the comparison."""
    header = ["env", "mode", "vs", "final", "ref final", "threshold", "traj", "ref traj", "wall s", "ref wall s",
              "sample ratio", "wall ratio", "reached", "ref reached"]
    body = [[r.env, r.mode, r.reference_mode, f"{r.final_return:.3f}", f"{r.reference_final_return:.3f}",
             f"{r.threshold:.3f}", f"{r.trajectories_to_threshold:.1f}",
             f"{r.reference_trajectories_to_threshold:.1f}", f"{r.wall_clock_to_threshold:.2f}",
             f"{r.reference_wall_clock_to_threshold:.2f}", f"{r.sample_efficiency_ratio:.3f}",
             f"{r.wall_clock_ratio:.3f}", r.reached, r.reference_reached] for r in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in [header, *body])


@dataclass
class ExperimentResult:
    runs: List[RunMetrics] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)
    files: List[Path] = field(default_factory=list)
    comparison: List[ComparisonRow] = field(default_factory=list)
    exit_code: int = EXIT_OK

    def by_mode(self, mode: str) -> List[RunMetrics]:
        return [run for run in self.runs if run.mode == mode]


def _shared_cost_model(plans: Sequence[RunSpec]) -> Optional[CostModel]:
    """One cost model for every non-realtime run, so compared modes share durations."""
    timed = [plan for plan in plans if plan.mode is not RunMode.ASYNC_REALTIME]
    return calibrate_cost_model(timed[0]) if timed else None


def run_experiment(config: ExperimentConfig, output_dir: Path, threads: Optional[int] = None) -> ExperimentResult:
    """
    Execute every planned run sequentially and write its CSVs.

    A failing run is logged and recorded; the exit code is 1 when any run
    failed.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    plans = config.plan_runs(threads)
    cost_model = _shared_cost_model(plans)
    result = ExperimentResult()
    for plan in plans:
        stem = run_file_stem(plan.env_name, plan.mode.value, plan.seed)
        try:
            metrics = execute_run(plan, cost_model=cost_model)
        except Exception as exc:
            logger.error("run %s failed: %s", stem, exc)
            result.failures[stem] = f"{type(exc).__name__}: {exc}"
            continue
        result.runs.append(metrics)
        result.files.append(metrics.write_csv(output_dir / f"{stem}.csv"))
        if plan.mode is not RunMode.ASYNC_REALTIME:
            result.files.append(metrics.write_events(output_dir / f"{stem}.events.csv"))
    for mode in config.modes:
        runs = result.by_mode(mode.value)
        if runs:
            path = output_dir / f"{config.run.env}_{mode.value}_aggregate.csv"
            path.write_text(aggregate_csv_text(runs))
            result.files.append(path)
    if config.run.compare_mode is not None:
        ours, reference = result.by_mode(config.run.mode.value), result.by_mode(config.run.compare_mode.value)
        if ours and reference:
            result.comparison = compare_summary(ours, reference)
            path = output_dir / f"{config.run.env}_comparison.csv"
            path.write_text(comparison_csv_text(result.comparison))
            result.files.append(path)
            logger.info("comparison:\n%s", comparison_table(result.comparison))
    if result.failures:
        result.exit_code = EXIT_RUN_FAILURE
        logger.warning("%d of %d runs failed", len(result.failures), len(plans))
    return result
