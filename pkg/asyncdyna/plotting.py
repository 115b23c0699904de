"""Learning-curve SVGs: eval return against wall-clock time or trajectories."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InvalidArgumentError  # noqa: E402
from .harness import AXES, aggregate  # noqa: E402
from .metrics import RunMetrics  # noqa: E402
from .workers import RunMode  # noqa: E402

logger = logging.getLogger(__name__)

AXIS_LABELS = {"wall_clock": "wall-clock time (s)", "samples": "trajectories collected"}


def line_style(mode: str) -> str:
    """Solid for the asynchronous framework, dotted for model-free, dashed for the rest."""
    if mode in (RunMode.ASYNC_REALTIME.value, RunMode.ASYNC_VIRTUAL.value):
        return "-"
    if mode == RunMode.MODEL_FREE.value:
        return ":"
    return "--"


@dataclass
class Series:
    label: str
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    linestyle: str


def plot_series(runs: Sequence[RunMetrics], axis: str) -> List[Series]:
    """One mean curve per (env, mode) group, in first-seen order."""
    if axis not in AXES:
        raise InvalidArgumentError(f"axis must be one of {sorted(AXES)}, got '{axis}'")
    groups: Dict[Tuple[str, str], List[RunMetrics]] = {}
    for run in runs:
        groups.setdefault((run.env, run.mode), []).append(run)
    series = []
    for (env, mode), members in groups.items():
        x, mean, std = aggregate(members, axis)
        series.append(Series(f"{env} {mode} (n={len(members)})", x, mean, std, line_style(mode)))
    return series


def emit_plot(csvs: Sequence[Path], axis: str = "samples") -> str:
    """Render the learning curves of the run CSVs as a standalone SVG document."""
    if not csvs:
        raise InvalidArgumentError("emit_plot needs at least one CSV")
    runs = [RunMetrics.read_csv(Path(p)) for p in csvs]
    series = plot_series(runs, axis)
    column = AXES[axis]
    x_max = max(max(run.column(column)) for run in runs)
    x_min = min(min(run.column(column)) for run in runs)

    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for s in series:
        (line,) = ax.plot(s.x, s.mean, linestyle=s.linestyle, label=s.label)
        ax.fill_between(s.x, s.mean - s.std, s.mean + s.std, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlim(min(x_min, 0.0), x_max)
    ax.set_xlabel(AXIS_LABELS[axis])
    ax.set_ylabel("average eval return")
    ax.set_title("Wall-clock time comparison" if axis == "wall_clock" else "Sample complexity comparison")
    ax.legend(loc="lower right", fontsize="small")
    ax.grid(alpha=0.3)
    fig.tight_layout()

    out = io.StringIO()
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug("plotted %d series from %d runs on %s axis", len(series), len(runs), axis)
    return out.getvalue()
