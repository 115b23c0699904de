"""
Deterministic virtual-time execution of the workers.

Each worker alternates between starting an operation (pull + step, at the
current virtual time) and finishing it (push, at start + duration). The
scheduler always advances the worker with the earliest pending time; ties go
to the fixed worker priority (data < model < policy) and then to a seeded
random order. Concurrency is simulated, so two runs with the same seed give
the same event sequence.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass
from enum import StrEnum
from typing import Dict, List, Optional, Protocol, Sequence

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)


class WorkerOp(StrEnum):
    ROLLOUT = "rollout"
    EPOCH = "epoch"
    GRAD_STEP = "grad_step"
    IDLE = "idle"
    DONE = "done"


@dataclass(frozen=True)
class CostModel:
    """Virtual seconds per unit of work."""

    rollout_duration: float
    epoch_duration: float
    grad_step_duration: float
    idle_fraction: float = 0.1

    def __post_init__(self):
        for name in ("rollout_duration", "epoch_duration", "grad_step_duration", "idle_fraction"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be > 0, got {getattr(self, name)}")

    def duration(self, op: WorkerOp, main_op: Optional[WorkerOp] = None) -> float:
        if op is WorkerOp.ROLLOUT:
            return self.rollout_duration
        if op is WorkerOp.EPOCH:
            return self.epoch_duration
        if op is WorkerOp.GRAD_STEP:
            return self.grad_step_duration
        if op is WorkerOp.IDLE:
            if main_op is None or main_op is WorkerOp.IDLE:
                raise InvalidArgumentError("an idle back-off needs the worker's main operation")
            return self.idle_fraction * self.duration(main_op)
        raise InvalidArgumentError(f"operation '{op}' has no duration")


class SchedulableWorker(Protocol):
    name: str
    priority: int
    main_op: WorkerOp
    last_pulled: int

    def begin(self) -> WorkerOp: ...

    def commit(self) -> Optional[int]: ...


@dataclass(frozen=True)
class Event:
    time: float
    worker: str
    op: WorkerOp
    pulled: int
    pushed: int

    def to_line(self) -> str:
        return f"{self.time!r},{self.worker},{self.op.value},{self.pulled},{self.pushed}"


class EventLog:
    """Ordered event record; idle back-offs are kept out unless asked for."""

    def __init__(self, keep_idle: bool = False):
        self.keep_idle = keep_idle
        self.events: List[Event] = []

    def record(self, time: float, worker: str, op: WorkerOp, pulled: int, pushed: Optional[int]) -> None:
        if op is WorkerOp.IDLE and not self.keep_idle:
            return
        event = Event(time, worker, op, pulled, pushed if pushed is not None else 0)
        logger.debug("event %s", event.to_line())
        self.events.append(event)

    def ops(self, worker: Optional[str] = None) -> List[WorkerOp]:
        return [e.op for e in self.events if worker is None or e.worker == worker]

    def lines(self) -> List[str]:
        return ["virtual_time,worker,op,pulled,pushed"] + [e.to_line() for e in self.events]


class VirtualClock:
    """Virtual time that only moves when advanced explicitly."""

    def __init__(self, start: float = 0.0):
        self.time = start

    def now(self) -> float:
        return self.time

    def advance(self, dt: float) -> float:
        self.time += dt
        return self.time

    def advance_to(self, t: float) -> float:
        if t < self.time:
            raise InvalidArgumentError(f"virtual time cannot move backwards ({t} < {self.time})")
        self.time = t
        return self.time


class VirtualScheduler:
    def __init__(self, workers: Sequence[SchedulableWorker], cost_model: CostModel, seed: int,
                 clock: Optional[VirtualClock] = None, log: Optional[EventLog] = None):
        names = [w.name for w in workers]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"worker names must be unique, got {names}")
        self.workers = list(workers)
        self.cost_model = cost_model
        self.clock = clock or VirtualClock()
        self.log = log or EventLog()
        self._rng = random.Random(seed)
        self._seq = 0
        self.busy_time: Dict[str, float] = {w.name: 0.0 for w in workers}

    def now(self) -> float:
        return self.clock.now()

    def _entry(self, time: float, index: int):
        self._seq += 1
        return (time, self.workers[index].priority, self._rng.random(), self._seq, index)

    def run(self, max_events: Optional[int] = None) -> List[Event]:
        """Run until every worker reports DONE (or `max_events` operations finished)."""
        heap = []
        in_flight: Dict[int, WorkerOp] = {}
        for i in range(len(self.workers)):
            heapq.heappush(heap, self._entry(0.0, i))
        finished = 0
        while heap:
            time, _, _, _, index = heapq.heappop(heap)
            self.clock.advance_to(time)
            worker = self.workers[index]
            if index in in_flight:
                op = in_flight.pop(index)
                pushed = worker.commit()
                self.log.record(time, worker.name, op, worker.last_pulled, pushed)
                finished += 1
                if max_events is not None and finished >= max_events:
                    break
            op = worker.begin()
            if op is WorkerOp.DONE:
                logger.debug("virtual t=%.3f worker %s done", time, worker.name)
                continue
            duration = self.cost_model.duration(op, worker.main_op)
            if op is not WorkerOp.IDLE:
                self.busy_time[worker.name] += duration
            in_flight[index] = op
            heapq.heappush(heap, self._entry(time + duration, index))
        return self.log.events


class SequentialDriver:
    """
    Runs one worker operation at a time in the order a caller scripts.

    Used by the synchronous and partially asynchronous schedules: virtual
    time advances by each operation's cost, and idle answers cost nothing.
    """

    def __init__(self, cost_model: CostModel, clock: Optional[VirtualClock] = None,
                 log: Optional[EventLog] = None):
        self.cost_model = cost_model
        self.clock = clock or VirtualClock()
        self.log = log or EventLog()
        self.busy_time: Dict[str, float] = {}

    def step(self, worker: SchedulableWorker) -> WorkerOp:
        op = worker.begin()
        if op in (WorkerOp.DONE, WorkerOp.IDLE):
            return op
        duration = self.cost_model.duration(op, worker.main_op)
        self.clock.advance(duration)
        self.busy_time[worker.name] = self.busy_time.get(worker.name, 0.0) + duration
        pushed = worker.commit()
        self.log.record(self.clock.now(), worker.name, op, worker.last_pulled, pushed)
        return op


def virtual_scheduler(workers: Sequence[SchedulableWorker], cost_model: CostModel, seed: int) -> List[Event]:
    return VirtualScheduler(workers, cost_model, seed).run()
