"""
The three workers and the run modes that drive them.

Workers talk only through the policy server, the model server and the data
buffer server. Each worker exposes the same two-phase protocol:

- begin(): pull from a server and do one unit of work (a rollout, a model
  epoch, a policy gradient step), or answer IDLE / DONE;
- commit(): push the result of that work, returning the version or total.

The asynchronous modes run the workers concurrently (threads in real time,
the discrete-event scheduler in virtual time); the synchronous and partially
asynchronous modes call them in a fixed order through a SequentialDriver.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .dynamics import (DatasetBuffer, Ensemble, EnsembleSettings, make_model_optimizers, reset_tracker_on_new_data,
                       should_stop, train_epoch, validation_loss, ValidationTracker)
from .envs import Environment, PacingMode, RewardParams, Trajectory, collect_rollout, make_env
from .errors import InvalidArgumentError, NumericError, PreconditionError, RunAbortedError
from .evaluation import rollout_seed
from .metrics import MetricsRecorder, RunMetrics
from .neural import params_from_bytes, params_to_bytes
from .policy import (GaussianPolicy, PPOOptimizers, TrainConfig, ValueFunction, batch_from_trajectories,
                     imagine_rollouts, ppo_update, sample_action)
from .scheduler import CostModel, EventLog, SequentialDriver, VirtualClock, VirtualScheduler, WorkerOp
from .servers import DataBufferServer, ParamBlob, ParamServer

logger = logging.getLogger(__name__)

REALTIME_IDLE_S = 0.001
MAX_CONSECUTIVE_SKIPS = 3


class RunMode(StrEnum):
    ASYNC_REALTIME = "async_realtime"
    ASYNC_VIRTUAL = "async_virtual"
    SYNC = "sync"
    PARTIAL_MODEL_POLICY = "partial_model_policy"
    PARTIAL_POLICY_DATA = "partial_policy_data"
    MODEL_FREE = "model_free"

    @property
    def is_async(self) -> bool:
        return self in (RunMode.ASYNC_REALTIME, RunMode.ASYNC_VIRTUAL)


@dataclass(frozen=True)
class StopCriterion:
    max_trajectories: int

    def __post_init__(self):
        if self.max_trajectories < 1:
            raise InvalidArgumentError(f"max_trajectories must be >= 1, got {self.max_trajectories}")

    def holds(self, buffer_server: DataBufferServer) -> bool:
        return buffer_server.total_pushed >= self.max_trajectories


@dataclass(frozen=True)
class AblationParams:
    """n rollouts per phase, e model epochs and g policy steps per alternation."""

    n: int = 1
    e: int = 1
    g: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise PreconditionError(f"ablation needs at least one rollout per phase, got n={self.n}")
        if self.e < 1:
            raise InvalidArgumentError(f"e must be >= 1, got {self.e}")
        if self.g < 0:
            raise InvalidArgumentError(f"g must be >= 0, got {self.g}")


@dataclass(frozen=True)
class RunSpec:
    """Everything one seeded run needs."""

    env_name: str
    mode: RunMode
    seed: int
    max_trajectories: int
    horizon: int = 200
    dt: float = 0.05
    speed_multiplier: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    ablation: AblationParams = field(default_factory=AblationParams)
    max_epochs_per_iteration: int = 50
    eval_every: int = 5
    eval_episodes: int = 5
    epoch_duration: Optional[float] = None
    grad_step_duration: Optional[float] = None
    idle_fraction: float = 0.1
    reward_params: RewardParams = field(default_factory=RewardParams)
    audit: bool = False
    threads: Optional[int] = None
    keep_idle_events: bool = False

    def make_env(self) -> Environment:
        return make_env(self.env_name, horizon=self.horizon, dt=self.dt, reward_params=self.reward_params)


def derive_seed(seed: int, stream: int, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, stream, *extra]).generate_state(1)[0])


# seed streams of one run
_POLICY_INIT, _VALUE_INIT, _ENSEMBLE_INIT, _MODEL_RNG, _POLICY_RNG, _SCHEDULER, _ACTION_NOISE = range(1, 8)


def encode_model_payload(ensemble: Ensemble, start_states: np.ndarray) -> bytes:
    """Ensemble parameters followed by a sample of real states to start imagined paths from."""
    states = np.asarray(start_states, dtype=np.float64).reshape(-1, ensemble.obs_dim)
    return ensemble.to_bytes() + params_to_bytes(states.ravel())


def decode_model_payload(data: bytes, ensemble: Ensemble) -> np.ndarray:
    """Load the parameters into `ensemble` and return the shipped start states."""
    offset = ensemble.load_bytes(data)
    flat, offset = params_from_bytes(data, offset)
    if offset != len(data):
        raise InvalidArgumentError("model blob has trailing bytes")
    return flat.reshape(-1, ensemble.obs_dim)


class Worker:
    name = "worker"
    priority = 0
    main_op = WorkerOp.IDLE

    def __init__(self, stop: StopCriterion, buffer_server: DataBufferServer):
        self.stop = stop
        self._stop_view = buffer_server
        self.last_pulled = 0
        self._finished = False

    def _should_exit(self) -> bool:
        if not self.stop.holds(self._stop_view):
            return False
        if not self._finished:
            self._finished = True
            logger.info("%s worker done: %s", self.name, self.counts())
        return True

    def counts(self) -> Dict[str, int]:
        return {}

    def begin(self) -> WorkerOp:
        raise NotImplementedError

    def commit(self) -> Optional[int]:
        raise NotImplementedError


class DataCollectionWorker(Worker):
    """Pull policy, collect one rollout, push the trajectory."""

    name = "data"
    priority = 0
    main_op = WorkerOp.ROLLOUT

    def __init__(self, env: Environment, policy_server: ParamServer, buffer_server: DataBufferServer,
                 stop: StopCriterion, initial_policy: GaussianPolicy, seed: int,
                 pacing: PacingMode = PacingMode.VIRTUAL, speed_multiplier: float = 1.0):
        super().__init__(stop, buffer_server)
        self.env = env
        self.policy_server = policy_server
        self.buffer_server = buffer_server
        self.initial_policy = initial_policy
        self.seed = seed
        self.pacing = pacing
        self.speed_multiplier = speed_multiplier
        self.rollouts_started = 0
        self.collected = 0
        self.discarded = 0
        self.version_trace: List[int] = []
        self._pending: Optional[Trajectory] = None

    def counts(self) -> Dict[str, int]:
        return {"collected": self.collected, "discarded": self.discarded}

    def _current_policy(self) -> Tuple[GaussianPolicy, int]:
        slot = self.policy_server.pull()
        if slot is None:
            return self.initial_policy, 0
        blob, version = slot
        policy, _ = self.initial_policy.with_bytes(blob.payload)
        return policy, version

    def begin(self) -> WorkerOp:
        if self._should_exit():
            return WorkerOp.DONE
        policy, version = self._current_policy()
        self.last_pulled = version
        self.version_trace.append(version)
        index = self.rollouts_started
        self.rollouts_started += 1
        env_seed = rollout_seed(self.seed, index)
        noise = np.random.default_rng(derive_seed(self.seed, _ACTION_NOISE, index))
        try:
            trajectory = collect_rollout(self.env, lambda s: sample_action(policy, s, noise)[0], self.pacing,
                                         env_seed=env_seed, speed_multiplier=self.speed_multiplier)
        except NumericError as exc:
            self.discarded += 1
            logger.warning("data worker discarded rollout %d (policy v%d): %s", index, version, exc)
            self._pending = None
            return WorkerOp.ROLLOUT
        trajectory.policy_version = version
        self._pending = trajectory
        return WorkerOp.ROLLOUT

    def commit(self) -> Optional[int]:
        trajectory, self._pending = self._pending, None
        if trajectory is None:
            return None
        total = self.buffer_server.push(trajectory)
        self.collected += 1
        return total


class ModelLearningWorker(Worker):
    """
    Drain new trajectories, train the ensemble one epoch, push the model.

    Early stopping is ensemble-wide: once the validation tracker fires the
    worker idles until new data arrives. `validation_fn` replaces the held-out
    loss computation, which lets a schedule be scripted.
    """

    name = "model"
    priority = 1
    main_op = WorkerOp.EPOCH

    def __init__(self, ensemble: Ensemble, buffer_server: DataBufferServer, model_server: ParamServer,
                 stop: StopCriterion, settings: EnsembleSettings, horizon: int, seed: int,
                 max_epochs_per_data: Optional[int] = None,
                 validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]] = None):
        super().__init__(stop, buffer_server)
        self.ensemble = ensemble
        self.buffer_server = buffer_server
        self.model_server = model_server
        self.settings = settings
        self.seed = seed
        self.max_epochs_per_data = max_epochs_per_data
        self.validation_fn = validation_fn
        self.dataset = DatasetBuffer(settings.capacity_trajectories * horizon, settings.validation_fraction)
        self.optimizers = make_model_optimizers(ensemble, settings.lr)
        self.tracker = ValidationTracker(beta=settings.beta_ema)
        self.rng = np.random.default_rng(derive_seed(seed, _MODEL_RNG))
        self.early_stopped = False
        self.epochs = 0
        self.epochs_since_data = 0
        self.pushes = 0
        self.failures = 0
        self.trajectories_seen = 0
        self.val_loss = math.nan
        self._pending: Optional[ParamBlob] = None
        self._last_pushed: Optional[ParamBlob] = None

    def counts(self) -> Dict[str, int]:
        return {"epochs": self.epochs, "pushes": self.pushes, "failures": self.failures}

    def exhausted(self) -> bool:
        """True when nothing more will be trained until new data arrives."""
        if self.dataset.train_size == 0 or self.early_stopped:
            return True
        return self.max_epochs_per_data is not None and self.epochs_since_data >= self.max_epochs_per_data

    def _take_new_data(self) -> None:
        arrived = self.buffer_server.drain()
        if not arrived:
            return
        for trajectory in arrived:
            self.dataset.append(trajectory)
        self.trajectories_seen += len(arrived)
        self.tracker = reset_tracker_on_new_data(self.tracker)
        self.early_stopped = False
        self.epochs_since_data = 0
        self.ensemble.fit_normalizer(self.dataset)

    def _validate(self, train_losses: np.ndarray) -> float:
        if self.validation_fn is not None:
            return float(self.validation_fn(self.ensemble, self.dataset))
        if self.dataset.validation_size == 0:
            return float(np.mean(train_losses))
        return validation_loss(self.ensemble, self.dataset)

    def _restore(self) -> None:
        """Roll networks and optimizers back; the normalizer stays fit to the current dataset."""
        normalizer = self.ensemble.normalizer
        if self._last_pushed is not None:
            decode_model_payload(self._last_pushed.payload, self.ensemble)
            self.ensemble.normalizer = normalizer
        else:
            fresh = self.settings.build(self.ensemble.obs_dim, self.ensemble.act_dim,
                                        derive_seed(self.seed, _ENSEMBLE_INIT))
            self.ensemble.params, self.ensemble.log_stds = fresh.params, fresh.log_stds
        self.optimizers = make_model_optimizers(self.ensemble, self.settings.lr)

    def begin(self) -> WorkerOp:
        if self._should_exit():
            return WorkerOp.DONE
        self._take_new_data()
        self.last_pulled = self.trajectories_seen
        if self.exhausted():
            return WorkerOp.IDLE
        self.epochs_since_data += 1
        try:
            train_losses = train_epoch(self.ensemble, self.dataset, self.optimizers, self.rng,
                                       self.settings.batch_size)
            val = self._validate(train_losses)
            if not math.isfinite(val):
                raise NumericError("validation loss is not finite")
        except NumericError as exc:
            self.failures += 1
            logger.warning("model worker discarded an epoch and restored the last pushed model: %s", exc)
            self._restore()
            self._pending = None
            return WorkerOp.EPOCH
        self.epochs += 1
        self.val_loss = val
        if self.settings.early_stopping:
            self.early_stopped, self.tracker = should_stop(self.tracker, val)
        logger.debug("model epoch %d train=%s val=%.5f stop=%s", self.epochs, np.round(train_losses, 5), val,
                     self.early_stopped)
        starts = self.dataset.recent_states(self.settings.start_states)
        self._pending = ParamBlob.create("model", encode_model_payload(self.ensemble, starts),
                                         {"val_loss": val, "epoch": float(self.epochs),
                                          "trajectories": float(self.trajectories_seen)})
        return WorkerOp.EPOCH

    def commit(self) -> Optional[int]:
        blob, self._pending = self._pending, None
        if blob is None:
            return None
        version = self.model_server.push(blob)
        self._last_pushed = blob
        self.pushes += 1
        return version


class PolicyImprovementWorker(Worker):
    """Pull the model, imagine a batch, take one PPO step, push the policy."""

    name = "policy"
    priority = 2
    main_op = WorkerOp.GRAD_STEP

    def __init__(self, policy: GaussianPolicy, value_fn: ValueFunction, model: Ensemble, env: Environment,
                 model_server: ParamServer, policy_server: ParamServer, stop: StopCriterion,
                 buffer_server: DataBufferServer, config: TrainConfig, seed: int):
        # buffer_server is only read for the stop criterion
        super().__init__(stop, buffer_server)
        self.policy = policy
        self.value_fn = value_fn
        self.model = model
        self.reward_fn = env.reward_batch
        self.action_bounds = (np.asarray(env.spec.action_low), np.asarray(env.spec.action_high))
        self.model_server = model_server
        self.policy_server = policy_server
        self.config = config
        self.optimizers = PPOOptimizers.fresh(policy, value_fn, config)
        self.rng = np.random.default_rng(derive_seed(seed, _POLICY_RNG))
        self.model_version = 0
        self.start_states = np.zeros((0, model.obs_dim))
        self.steps = 0
        self.skips = 0
        self.consecutive_skips = 0
        self.imagined_steps = 0
        self.model_trace: List[int] = []
        self._pending: Optional[ParamBlob] = None

    def counts(self) -> Dict[str, int]:
        return {"steps": self.steps, "skips": self.skips, "imagined_steps": self.imagined_steps}

    def _pull_model(self) -> bool:
        slot = self.model_server.pull()
        if slot is None:
            return False
        blob, version = slot
        if version != self.model_version:
            self.start_states = decode_model_payload(blob.payload, self.model)
            self.model_version = version
        return self.start_states.shape[0] > 0

    def _skip(self, reason: str) -> WorkerOp:
        self.skips += 1
        self.consecutive_skips += 1
        logger.warning("policy worker skipped an update on model v%d: %s", self.model_version, reason)
        if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
            logger.warning("policy worker re-pulling the model after %d consecutive skips", self.consecutive_skips)
            self.model_version = 0
            self.consecutive_skips = 0
        self._pending = None
        return WorkerOp.GRAD_STEP

    def begin(self) -> WorkerOp:
        if self._should_exit():
            return WorkerOp.DONE
        if not self._pull_model():
            return WorkerOp.IDLE
        self.last_pulled = self.model_version
        self.model_trace.append(self.model_version)
        picks = self.rng.integers(self.start_states.shape[0], size=self.config.imagined_batch_paths)
        try:
            batch = imagine_rollouts(self.policy, self.value_fn, self.model, self.start_states[picks],
                                     self.reward_fn, self.config, self.rng, action_bounds=self.action_bounds)
        except NumericError as exc:
            return self._skip(str(exc))
        policy, value_fn, stats = ppo_update(self.policy, self.value_fn, batch, self.config, self.optimizers)
        if stats["skipped"]:
            return self._skip(str(stats["error"]))
        self.consecutive_skips = 0
        self.policy, self.value_fn = policy, value_fn
        self.imagined_steps += len(batch)
        self._pending = ParamBlob.create("policy", policy.to_bytes(),
                                         {"imagined_steps": float(self.imagined_steps),
                                          "model_version": float(self.model_version),
                                          "surrogate": float(stats["surrogate"])})
        return WorkerOp.GRAD_STEP

    def commit(self) -> Optional[int]:
        blob, self._pending = self._pending, None
        if blob is None:
            return None
        version = self.policy_server.push(blob)
        self.steps += 1
        return version


class ModelFreePolicyWorker(Worker):
    """PPO on real trajectories: up to `steps_per_batch` updates on each freshly drained batch."""

    name = "policy"
    priority = 2
    main_op = WorkerOp.GRAD_STEP

    def __init__(self, policy: GaussianPolicy, value_fn: ValueFunction, buffer_server: DataBufferServer,
                 policy_server: ParamServer, stop: StopCriterion, config: TrainConfig, steps_per_batch: int):
        super().__init__(stop, buffer_server)
        self.policy = policy
        self.value_fn = value_fn
        self.buffer_server = buffer_server
        self.policy_server = policy_server
        self.config = config
        self.steps_per_batch = steps_per_batch
        self.optimizers = PPOOptimizers.fresh(policy, value_fn, config)
        self.batch = None
        self.steps_on_batch = 0
        self.trajectories_seen = 0
        self.steps = 0
        self.skips = 0
        self.model_trace: List[int] = []
        self._pending: Optional[ParamBlob] = None

    def counts(self) -> Dict[str, int]:
        return {"steps": self.steps, "skips": self.skips}

    def begin(self) -> WorkerOp:
        if self._should_exit():
            return WorkerOp.DONE
        arrived = self.buffer_server.drain()
        if arrived:
            self.trajectories_seen += len(arrived)
            self.batch = batch_from_trajectories(self.policy, self.value_fn, arrived, self.config)
            self.steps_on_batch = 0
        if self.batch is None or self.steps_on_batch >= self.steps_per_batch:
            return WorkerOp.IDLE
        self.last_pulled = self.trajectories_seen
        self.steps_on_batch += 1
        policy, value_fn, stats = ppo_update(self.policy, self.value_fn, self.batch, self.config, self.optimizers)
        if stats["skipped"]:
            self.skips += 1
            logger.warning("model-free update skipped: %s", stats["error"])
            self._pending = None
            return WorkerOp.GRAD_STEP
        self.policy, self.value_fn = policy, value_fn
        self._pending = ParamBlob.create("policy", policy.to_bytes(), {"imagined_steps": 0.0})
        return WorkerOp.GRAD_STEP

    def commit(self) -> Optional[int]:
        blob, self._pending = self._pending, None
        if blob is None:
            return None
        version = self.policy_server.push(blob)
        self.steps += 1
        return version


@dataclass
class RunContext:
    spec: RunSpec
    env: Environment
    policy_server: ParamServer
    model_server: ParamServer
    buffer_server: DataBufferServer
    stop: StopCriterion
    initial_policy: GaussianPolicy
    data: DataCollectionWorker
    model: Optional[ModelLearningWorker]
    policy: Worker
    clock: VirtualClock
    log: EventLog
    started: float = field(default_factory=time.perf_counter)

    @property
    def workers(self) -> List[Worker]:
        return [w for w in (self.data, self.model, self.policy) if w is not None]


def build_run(spec: RunSpec, validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]] = None,
              pacing: PacingMode = PacingMode.VIRTUAL) -> RunContext:
    env = spec.make_env()
    obs_dim, act_dim = env.spec.obs_dim, env.spec.act_dim
    policy_server = ParamServer("policy_server", kind="policy", audit=spec.audit)
    model_server = ParamServer("model_server", kind="model", audit=spec.audit)
    buffer_server = DataBufferServer("data_buffer", audit=spec.audit)
    stop = StopCriterion(spec.max_trajectories)
    initial_policy = GaussianPolicy.initial(obs_dim, act_dim, spec.train, derive_seed(spec.seed, _POLICY_INIT))
    value_fn = ValueFunction.initial(obs_dim, spec.train, derive_seed(spec.seed, _VALUE_INIT))
    data = DataCollectionWorker(env, policy_server, buffer_server, stop, initial_policy, spec.seed, pacing,
                                spec.speed_multiplier)
    model: Optional[ModelLearningWorker] = None
    if spec.mode is RunMode.MODEL_FREE:
        policy: Worker = ModelFreePolicyWorker(initial_policy, value_fn, buffer_server, policy_server, stop,
                                               spec.train, spec.ablation.g)
    else:
        ensemble_seed = derive_seed(spec.seed, _ENSEMBLE_INIT)
        model = ModelLearningWorker(spec.ensemble.build(obs_dim, act_dim, ensemble_seed), buffer_server,
                                    model_server, stop, spec.ensemble, spec.horizon, spec.seed,
                                    max_epochs_per_data=spec.max_epochs_per_iteration, validation_fn=validation_fn)
        policy = PolicyImprovementWorker(initial_policy, value_fn, spec.ensemble.build(obs_dim, act_dim, ensemble_seed),
                                         env, model_server, policy_server, stop, buffer_server, spec.train, spec.seed)
    return RunContext(spec=spec, env=env, policy_server=policy_server, model_server=model_server,
                      buffer_server=buffer_server, stop=stop, initial_policy=initial_policy, data=data,
                      model=model, policy=policy, clock=VirtualClock(), log=EventLog(keep_idle=spec.keep_idle_events))


def _three_significant(seconds: float) -> float:
    return float(f"{max(seconds, 1e-6):.3g}")


def _measure_costs(spec: RunSpec) -> Tuple[float, float]:
    env = spec.make_env()
    obs_dim, act_dim = env.spec.obs_dim, env.spec.act_dim
    rng = np.random.default_rng(spec.seed)
    low, high = np.asarray(env.spec.action_low), np.asarray(env.spec.action_high)
    trajectory = collect_rollout(env, lambda s: rng.uniform(low, high), env_seed=spec.seed)
    dataset = DatasetBuffer(spec.ensemble.capacity_trajectories * spec.horizon, spec.ensemble.validation_fraction)
    dataset.append(trajectory)
    ensemble = spec.ensemble.build(obs_dim, act_dim, spec.seed)
    ensemble.fit_normalizer(dataset)
    started = time.perf_counter()
    train_epoch(ensemble, dataset, make_model_optimizers(ensemble, spec.ensemble.lr), rng, spec.ensemble.batch_size)
    epoch = time.perf_counter() - started
    policy = GaussianPolicy.initial(obs_dim, act_dim, spec.train, spec.seed)
    value_fn = ValueFunction.initial(obs_dim, spec.train, spec.seed)
    starts = trajectory.states[rng.integers(len(trajectory), size=spec.train.imagined_batch_paths)]
    started = time.perf_counter()
    batch = imagine_rollouts(policy, value_fn, ensemble, starts, env.reward_batch, spec.train, rng,
                             action_bounds=(low, high))
    ppo_update(policy, value_fn, batch, spec.train, PPOOptimizers.fresh(policy, value_fn, spec.train))
    grad_step = time.perf_counter() - started
    return _three_significant(epoch), _three_significant(grad_step)


def calibrate_cost_model(spec: RunSpec) -> CostModel:
    """
    Virtual durations for the run; rollouts last H * dt / speed_multiplier.

    Epoch and gradient-step durations come from the run config when given,
    otherwise they are measured once on synthetic data and frozen.
    """
    rollout = spec.horizon * spec.dt / spec.speed_multiplier
    epoch, grad_step = spec.epoch_duration, spec.grad_step_duration
    if epoch is None or grad_step is None:
        measured_epoch, measured_grad = _measure_costs(spec)
        epoch = measured_epoch if epoch is None else epoch
        grad_step = measured_grad if grad_step is None else grad_step
        logger.info("measured cost model: epoch %.3gs, grad step %.3gs", epoch, grad_step)
    return CostModel(rollout_duration=rollout, epoch_duration=epoch, grad_step_duration=grad_step,
                     idle_fraction=spec.idle_fraction)


def _recorder(ctx: RunContext, now: Callable[[], float]) -> MetricsRecorder:
    recorder = MetricsRecorder(ctx.policy_server, ctx.model_server, ctx.spec.max_trajectories,
                               ctx.spec.eval_every, clock=now)
    ctx.buffer_server.subscribe(recorder.on_push)
    return recorder


def _finish(ctx: RunContext, recorder: MetricsRecorder, elapsed: float, busy: Dict[str, float]) -> RunMetrics:
    spec = ctx.spec
    real_elapsed = time.perf_counter() - ctx.started
    rows = recorder.finalize(spec.make_env(), ctx.initial_policy, spec.eval_episodes, spec.seed, spec.mode.value)
    policy = ctx.policy
    summary: Dict[str, float] = {
        "trajectories": float(ctx.buffer_server.total_pushed),
        "real_env_steps": float(recorder.real_env_steps),
        "elapsed_s": elapsed,
        "real_elapsed_s": real_elapsed,
        "final_return": rows[-1].avg_eval_return if rows else math.nan,
        "discarded_rollouts": float(ctx.data.discarded),
        "policy_steps": float(policy.steps),
        "policy_skips": float(policy.skips),
        "imagined_steps": float(getattr(policy, "imagined_steps", 0)),
    }
    if ctx.model is not None:
        summary["model_epochs"] = float(ctx.model.epochs)
        summary["model_failures"] = float(ctx.model.failures)
    for worker in ctx.workers:
        summary[f"utilization_{worker.name}"] = busy.get(worker.name, 0.0) / elapsed if elapsed > 0 else 0.0
    metrics = RunMetrics(env=spec.env_name, mode=spec.mode.value, seed=spec.seed, rows=rows, summary=summary,
                         event_lines=ctx.log.lines(),
                         traces={"data_policy_versions": list(ctx.data.version_trace),
                                 "policy_model_versions": list(policy.model_trace)})
    logger.info("%s/%s seed %d finished: %d trajectories, final return %.3f, %.1fs", spec.env_name,
                spec.mode.value, spec.seed, ctx.buffer_server.total_pushed, summary["final_return"], elapsed)
    return metrics


def _realtime_loop(worker: Worker, abort: threading.Event, gate, errors: List[Tuple[str, BaseException]],
                   busy: Dict[str, float]) -> None:
    try:
        while not abort.is_set():
            started = time.perf_counter()
            with gate if worker.main_op is not WorkerOp.ROLLOUT else nullcontext():
                op = worker.begin()
            if op is WorkerOp.DONE:
                return
            if op is WorkerOp.IDLE:
                time.sleep(REALTIME_IDLE_S)
                continue
            worker.commit()
            busy[worker.name] += time.perf_counter() - started
    except Exception as exc:
        logger.exception("%s worker failed", worker.name)
        errors.append((worker.name, exc))
        abort.set()


def _run_realtime(ctx: RunContext) -> RunMetrics:
    threads_cap = ctx.spec.threads
    gate = threading.BoundedSemaphore(threads_cap) if threads_cap else nullcontext()
    abort = threading.Event()
    errors: List[Tuple[str, BaseException]] = []
    busy = {w.name: 0.0 for w in ctx.workers}
    start = time.perf_counter()
    recorder = _recorder(ctx, lambda: time.perf_counter() - start)
    threads = [threading.Thread(target=_realtime_loop, args=(w, abort, gate, errors, busy), name=f"{w.name}-worker",
                                daemon=True) for w in ctx.workers]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    elapsed = time.perf_counter() - start
    if errors:
        worker, cause = errors[0]
        raise RunAbortedError(worker, cause)
    return _finish(ctx, recorder, elapsed, busy)


def run_async(spec: RunSpec, cost_model: Optional[CostModel] = None,
              validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]] = None) -> RunMetrics:
    """Run the three workers concurrently, in real time or under the virtual scheduler."""
    if not spec.mode.is_async:
        raise InvalidArgumentError(f"run_async cannot run mode '{spec.mode}'")
    logger.info("starting %s run on %s, seed %d, %d trajectories", spec.mode.value, spec.env_name, spec.seed,
                spec.max_trajectories)
    if spec.mode is RunMode.ASYNC_REALTIME:
        return _run_realtime(build_run(spec, validation_fn, PacingMode.REALTIME))
    ctx = build_run(spec, validation_fn)
    cost_model = cost_model or calibrate_cost_model(spec)
    scheduler = VirtualScheduler(ctx.workers, cost_model, derive_seed(spec.seed, _SCHEDULER), ctx.clock, ctx.log)
    recorder = _recorder(ctx, ctx.clock.now)
    try:
        scheduler.run()
    except Exception as exc:
        raise RunAbortedError("scheduler", exc) from exc
    return _finish(ctx, recorder, ctx.clock.now(), scheduler.busy_time)


def _collect(driver: SequentialDriver, data: DataCollectionWorker, n: int) -> bool:
    """Collect up to n rollouts; False once the stop criterion holds."""
    for _ in range(n):
        if driver.step(data) is WorkerOp.DONE:
            return False
    return True


def _fit_model(driver: SequentialDriver, model: ModelLearningWorker, max_epochs: int) -> int:
    """Train until early stop or the per-iteration cap; returns epochs run."""
    epochs = 0
    while epochs < max_epochs:
        if driver.step(model) is not WorkerOp.EPOCH:
            break
        epochs += 1
        if model.exhausted():
            break
    return epochs


def _policy_steps(driver: SequentialDriver, policy: Worker, g: int) -> int:
    done = 0
    for _ in range(g):
        if driver.step(policy) is not WorkerOp.GRAD_STEP:
            break
        done += 1
    return done


def _run_sequential(spec: RunSpec, schedule: Callable[[SequentialDriver, RunContext], None],
                    cost_model: Optional[CostModel],
                    validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]]) -> RunMetrics:
    logger.info("starting %s run on %s, seed %d, %d trajectories", spec.mode.value, spec.env_name, spec.seed,
                spec.max_trajectories)
    ctx = build_run(spec, validation_fn)
    driver = SequentialDriver(cost_model or calibrate_cost_model(spec), ctx.clock, ctx.log)
    recorder = _recorder(ctx, ctx.clock.now)
    schedule(driver, ctx)
    return _finish(ctx, recorder, ctx.clock.now(), driver.busy_time)


def _sync_schedule(driver: SequentialDriver, ctx: RunContext) -> None:
    spec = ctx.spec
    while _collect(driver, ctx.data, spec.ablation.n):
        _fit_model(driver, ctx.model, spec.max_epochs_per_iteration)
        _policy_steps(driver, ctx.policy, spec.ablation.g)


def _partial_model_policy_schedule(driver: SequentialDriver, ctx: RunContext) -> None:
    spec = ctx.spec
    e, g = spec.ablation.e, spec.ablation.g
    while _collect(driver, ctx.data, spec.ablation.n):
        epochs = 0
        while epochs < spec.max_epochs_per_iteration:
            ran = _fit_model(driver, ctx.model, min(e, spec.max_epochs_per_iteration - epochs))
            epochs += ran
            _policy_steps(driver, ctx.policy, g)
            if ran == 0 or ctx.model.exhausted():
                break


def _partial_policy_data_schedule(driver: SequentialDriver, ctx: RunContext) -> None:
    spec = ctx.spec
    n, g = spec.ablation.n, spec.ablation.g
    if not _collect(driver, ctx.data, n):
        return
    while True:
        _fit_model(driver, ctx.model, spec.max_epochs_per_iteration)
        for _ in range(n):
            _policy_steps(driver, ctx.policy, g)
            if not _collect(driver, ctx.data, 1):
                return


def _model_free_schedule(driver: SequentialDriver, ctx: RunContext) -> None:
    spec = ctx.spec
    while _collect(driver, ctx.data, spec.ablation.n):
        _policy_steps(driver, ctx.policy, spec.ablation.g)


def run_sync(spec: RunSpec, cost_model: Optional[CostModel] = None,
             validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]] = None) -> RunMetrics:
    """Collect N rollouts, fit the model to early stop, take G policy steps; repeat."""
    return _run_sequential(spec, _sync_schedule, cost_model, validation_fn)


def run_partial_model_policy(spec: RunSpec, cost_model: Optional[CostModel] = None,
                             validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]] = None) -> RunMetrics:
    """Collect N rollouts, then alternate E model epochs with G policy steps until the model stops."""
    return _run_sequential(spec, _partial_model_policy_schedule, cost_model, validation_fn)


def run_partial_policy_data(spec: RunSpec, cost_model: Optional[CostModel] = None,
                            validation_fn: Optional[Callable[[Ensemble, DatasetBuffer], float]] = None) -> RunMetrics:
    """Fit the model, then N times take G policy steps and collect one rollout."""
    return _run_sequential(spec, _partial_policy_data_schedule, cost_model, validation_fn)


def run_model_free(spec: RunSpec, cost_model: Optional[CostModel] = None) -> RunMetrics:
    """PPO on real data: collect N rollouts, take G steps on them."""
    return _run_sequential(spec, _model_free_schedule, cost_model, None)


RUNNERS: Dict[RunMode, Callable[..., RunMetrics]] = {
    RunMode.ASYNC_REALTIME: run_async,
    RunMode.ASYNC_VIRTUAL: run_async,
    RunMode.SYNC: run_sync,
    RunMode.PARTIAL_MODEL_POLICY: run_partial_model_policy,
    RunMode.PARTIAL_POLICY_DATA: run_partial_policy_data,
    RunMode.MODEL_FREE: run_model_free,
}


def execute_run(spec: RunSpec, cost_model: Optional[CostModel] = None) -> RunMetrics:
    return RUNNERS[spec.mode](spec, cost_model=cost_model)
