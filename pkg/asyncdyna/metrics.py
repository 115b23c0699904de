"""
Run metrics: snapshots taken on data pushes, evaluated after the run.

Snapshots are cheap (counters plus the latest policy blob) so recording
never slows a worker down; the deterministic evaluation runs once the run is
over, on a separate environment instance. Timestamps come from the run clock
(virtual seconds, or elapsed seconds in real time), so wall_clock_s and
virtual_time_s coincide. The real elapsed time of a virtual run goes to the
run summary as real_elapsed_s, outside the CSV, which stays reproducible.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .envs import Environment, Trajectory
from .errors import InvalidArgumentError
from .evaluation import evaluate_policy
from .policy import GaussianPolicy
from .servers import ParamServer

logger = logging.getLogger(__name__)


def format_float(value: float) -> str:
    """Shortest representation that round-trips a 64-bit float."""
    return repr(float(value))


@dataclass
class MetricsRow:
    env: str
    mode: str
    seed: int
    wall_clock_s: float
    virtual_time_s: float
    real_env_steps: int
    trajectories: int
    avg_eval_return: float
    std_eval_return: float
    model_val_loss: float
    model_version: int
    policy_version: int
    imagined_steps: int


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRow))
_INT_COLUMNS = {"seed", "real_env_steps", "trajectories", "model_version", "policy_version", "imagined_steps"}
_FLOAT_COLUMNS = {"wall_clock_s", "virtual_time_s", "avg_eval_return", "std_eval_return", "model_val_loss"}


@dataclass
class RunMetrics:
    env: str
    mode: str
    seed: int
    rows: List[MetricsRow] = field(default_factory=list)
    summary: Dict[str, float] = field(default_factory=dict)
    event_lines: List[str] = field(default_factory=list)
    traces: Dict[str, List[int]] = field(default_factory=dict)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.rows]

    def csv_text(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            values = asdict(row)
            writer.writerow([format_float(values[c]) if c in _FLOAT_COLUMNS else values[c] for c in CSV_COLUMNS])
        return out.getvalue()

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv_text())
        return path

    def write_events(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.event_lines) + "\n")
        return path

    @classmethod
    def read_csv(cls, path: Path) -> "RunMetrics":
        rows = []
        with open(path, newline="") as fh:
            for raw in csv.DictReader(fh):
                converted = {}
                for c in CSV_COLUMNS:
                    if c in _INT_COLUMNS:
                        converted[c] = int(raw[c])
                    elif c in _FLOAT_COLUMNS:
                        converted[c] = float(raw[c])
                    else:
                        converted[c] = raw[c]
                rows.append(MetricsRow(**converted))
        if not rows:
            raise InvalidArgumentError(f"{path}: no metrics rows")
        return cls(env=rows[0].env, mode=rows[0].mode, seed=rows[0].seed, rows=rows)


@dataclass
class Snapshot:
    wall_clock_s: float
    virtual_time_s: float
    real_env_steps: int
    trajectories: int
    policy_payload: Optional[bytes]
    policy_version: int
    model_version: int
    model_val_loss: float
    imagined_steps: int


class MetricsRecorder:
    """Subscribes to the data buffer server and snapshots every `eval_every` pushes and the last one."""

    def __init__(self, policy_server: ParamServer, model_server: ParamServer, max_trajectories: int,
                 eval_every: int, clock: Callable[[], float]):
        self.policy_server = policy_server
        self.model_server = model_server
        self.max_trajectories = max_trajectories
        self.eval_every = eval_every
        self.clock = clock
        self.real_env_steps = 0
        self.snapshots: List[Snapshot] = []

    def on_push(self, trajectory: Trajectory, total: int) -> None:
        self.real_env_steps += len(trajectory)
        if total % self.eval_every != 0 and total != self.max_trajectories:
            return
        now = self.clock()
        policy_slot = self.policy_server.pull()
        model_slot = self.model_server.pull()
        self.snapshots.append(Snapshot(
            wall_clock_s=now,
            virtual_time_s=now,
            real_env_steps=self.real_env_steps,
            trajectories=total,
            policy_payload=policy_slot[0].payload if policy_slot else None,
            policy_version=policy_slot[1] if policy_slot else 0,
            model_version=model_slot[1] if model_slot else 0,
            model_val_loss=model_slot[0].get("val_loss", math.nan) if model_slot else math.nan,
            imagined_steps=int(policy_slot[0].get("imagined_steps", 0)) if policy_slot else 0,
        ))

    def finalize(self, env: Environment, initial_policy: GaussianPolicy, episodes: int, seed: int,
                 mode: str) -> List[MetricsRow]:
        rows = []
        cache: Dict[int, Tuple[float, float]] = {}
        for snap in self.snapshots:
            if snap.policy_version not in cache:
                policy = initial_policy
                if snap.policy_payload is not None:
                    policy, _ = initial_policy.with_bytes(snap.policy_payload)
                cache[snap.policy_version] = evaluate_policy(env, policy, episodes, seed)
            mean, std = cache[snap.policy_version]
            rows.append(MetricsRow(
                env=env.spec.name, mode=mode, seed=seed, wall_clock_s=snap.wall_clock_s,
                virtual_time_s=snap.virtual_time_s, real_env_steps=snap.real_env_steps,
                trajectories=snap.trajectories, avg_eval_return=mean, std_eval_return=std,
                model_val_loss=snap.model_val_loss, model_version=snap.model_version,
                policy_version=snap.policy_version, imagined_steps=snap.imagined_steps))
        return rows
