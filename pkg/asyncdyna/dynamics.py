"""
Learned dynamics: an ensemble of K delta-predicting networks.

Each model maps normalized (s, a) to the normalized state difference s' - s
and carries its own state-independent log standard deviation, trained by
maximum likelihood. Imagined transitions pick one model uniformly at random
and use its mean prediction. Early stopping follows an exponential moving
average of the validation loss that is reset whenever new data arrives.
"""

from __future__ import annotations

import copy
import logging
import struct
from collections import deque
from dataclasses import dataclass, replace
from typing import Deque, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .envs import Trajectory, Transition
from .errors import InvalidArgumentError, NumericError, PreconditionError
from .neural import (Activation, AdamState, MlpSpec, adam_step, backward_batch, forward_batch,
                     gaussian_log_density_rows, init_params, params_from_bytes, params_to_bytes)

logger = logging.getLogger(__name__)

NORM_EPS = 1e-6
MODEL_LOG_STD_BOUNDS = (-10.0, 2.0)


@dataclass
class _Entry:
    transition: Transition
    validation: bool


class DatasetBuffer:
    """
    Fixed-capacity FIFO of transitions with a held-out validation split.

    Every k-th appended transition (k = floor(1 / validation_fraction)) is
    assigned to validation; eviction is oldest-first over both splits.
    """

    def __init__(self, capacity: int, validation_fraction: float = 0.1):
        if capacity < 1:
            raise InvalidArgumentError("buffer capacity must be >= 1")
        if not 0.0 <= validation_fraction < 1.0:
            raise InvalidArgumentError("validation_fraction must be in [0, 1)")
        self.capacity = capacity
        self.validation_fraction = validation_fraction
        self._stride = int(np.floor(1.0 / validation_fraction)) if validation_fraction > 0 else 0
        self._storage: Deque[_Entry] = deque(maxlen=capacity)
        self._seen = 0
        self._dims: Optional[Tuple[int, int]] = None

    def __len__(self) -> int:
        return len(self._storage)

    @property
    def train_size(self) -> int:
        return sum(1 for e in self._storage if not e.validation)

    @property
    def validation_size(self) -> int:
        return sum(1 for e in self._storage if e.validation)

    def append(self, trajectory: Trajectory) -> "DatasetBuffer":
        for tr in trajectory.transitions:
            dims = (tr.s.shape[0], tr.a.shape[0])
            if tr.s.ndim != 1 or tr.a.ndim != 1 or tr.s_next.shape != tr.s.shape:
                raise InvalidArgumentError("transition vectors must be flat and s, s_next equal length")
            if self._dims is None:
                self._dims = dims
            elif dims != self._dims:
                raise InvalidArgumentError(f"transition dims {dims} differ from buffer dims {self._dims}")
        for tr in trajectory.transitions:
            validation = self._stride > 0 and self._seen % self._stride == self._stride - 1
            self._storage.append(_Entry(tr, validation))
            self._seen += 1
        return self

    def transitions(self) -> List[Transition]:
        return [e.transition for e in self._storage]

    def _arrays(self, validation: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        entries = [e.transition for e in self._storage if e.validation == validation]
        if not entries:
            obs_dim, act_dim = self._dims or (0, 0)
            return np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros((0, obs_dim))
        return (np.stack([t.s for t in entries]), np.stack([t.a for t in entries]),
                np.stack([t.s_next for t in entries]))

    def train_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._arrays(validation=False)

    def validation_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._arrays(validation=True)

    def recent_states(self, n: int) -> np.ndarray:
        """The states of the newest `n` transitions, oldest first."""
        entries = list(self._storage)[-n:] if n > 0 else []
        if not entries:
            return np.zeros((0, self._dims[0] if self._dims else 0))
        return np.stack([e.transition.s for e in entries])


def buffer_append(buffer: DatasetBuffer, trajectory: Trajectory) -> DatasetBuffer:
    return buffer.append(trajectory)


@dataclass
class Normalizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    count: int = 0

    @classmethod
    def identity(cls, in_dim: int, out_dim: int) -> "Normalizer":
        return cls(np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim), 0)

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray, eps: float = NORM_EPS) -> "Normalizer":
        return cls(inputs.mean(axis=0), np.maximum(inputs.std(axis=0), eps),
                   targets.mean(axis=0), np.maximum(targets.std(axis=0), eps), int(inputs.shape[0]))

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_std

    def denormalize_input(self, x: np.ndarray) -> np.ndarray:
        return x * self.in_std + self.in_mean

    def normalize_target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.out_mean) / self.out_std

    def denormalize_target(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_std + self.out_mean

    def to_bytes(self) -> bytes:
        return (b"".join(params_to_bytes(v) for v in (self.in_mean, self.in_std, self.out_mean, self.out_std))
                + struct.pack("<Q", self.count))

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["Normalizer", int]:
        vectors = []
        for _ in range(4):
            vec, offset = params_from_bytes(data, offset)
            vectors.append(vec)
        (count,) = struct.unpack_from("<Q", data, offset)
        return cls(*vectors, count=count), offset + 8


class Ensemble:
    """K independently initialized delta models sharing one normalizer."""

    def __init__(self, obs_dim: int, act_dim: int, k: int = 4, hidden_sizes: Sequence[int] = (64, 64),
                 activation: Activation = Activation.RELU, seed: int = 0, state_clip: float = 100.0,
                 stochastic_head: bool = False):
        if k < 1:
            raise InvalidArgumentError("ensemble needs at least one model")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.k = k
        self.spec = MlpSpec((obs_dim + act_dim, *hidden_sizes, obs_dim), activation)
        self.state_clip = state_clip
        self.stochastic_head = stochastic_head
        rng = np.random.default_rng(seed)
        self.params: List[np.ndarray] = [init_params(self.spec, rng) for _ in range(k)]
        self.log_stds: List[np.ndarray] = [np.zeros(obs_dim) for _ in range(k)]
        self.normalizer = Normalizer.identity(obs_dim + act_dim, obs_dim)

    def copy(self) -> "Ensemble":
        return copy.deepcopy(self)

    def fit_normalizer(self, buffer: DatasetBuffer) -> None:
        S, A, S_next = buffer.train_arrays()
        if S.shape[0] == 0:
            return
        self.normalizer = Normalizer.fit(np.concatenate([S, A], axis=1), S_next - S)

    def _inputs(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if S.shape[1] != self.obs_dim or A.shape[1] != self.act_dim or S.shape[0] != A.shape[0]:
            raise InvalidArgumentError(f"ensemble expects ({self.obs_dim}, {self.act_dim}) rows, "
                                       f"got {S.shape} and {A.shape}")
        return self.normalizer.normalize_input(np.concatenate([S, A], axis=1))

    def nll(self, i: int, X: np.ndarray, Y: np.ndarray) -> float:
        """Mean negative log-likelihood of normalized targets under model i."""
        mean, _ = forward_batch(self.spec, self.params[i], X)
        return float(-np.mean(gaussian_log_density_rows(mean, self.log_stds[i], Y)))

    def nll_and_grad(self, i: int, X: np.ndarray, Y: np.ndarray) -> Tuple[float, np.ndarray]:
        """NLL of model i and its gradient w.r.t. [params, log_std]."""
        mean, cache = forward_batch(self.spec, self.params[i], X)
        log_std = self.log_stds[i]
        inv_var = np.exp(-2.0 * log_std)
        diff = mean - Y
        n = X.shape[0]
        loss = float(-np.mean(gaussian_log_density_rows(mean, log_std, Y)))
        d_mean = diff * inv_var / n
        d_log_std = np.mean(1.0 - diff * diff * inv_var, axis=0)
        d_params, _ = backward_batch(self.spec, self.params[i], cache, d_mean)
        return loss, np.concatenate([d_params, d_log_std])

    def mean_deltas(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Normalized mean deltas from every model, shape (K, batch, obs_dim)."""
        X = self._inputs(S, A)
        return np.stack([forward_batch(self.spec, p, X)[0] for p in self.params])

    def disagreement(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Standard deviation across models of the denormalized mean deltas."""
        deltas = self.normalizer.denormalize_target(self.mean_deltas(S, A))
        return deltas.std(axis=0)

    def _finish(self, S: np.ndarray, delta_norm: np.ndarray, log_std: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
        if self.stochastic_head:
            delta_norm = delta_norm + np.exp(log_std) * rng.standard_normal(delta_norm.shape)
        s_next = S + self.normalizer.denormalize_target(delta_norm)
        obs_mean = self.normalizer.in_mean[:self.obs_dim]
        obs_std = self.normalizer.in_std[:self.obs_dim]
        clipped = np.clip((s_next - obs_mean) / obs_std, -self.state_clip, self.state_clip)
        return clipped * obs_std + obs_mean

    def predict_batch(self, S: np.ndarray, A: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One imagined step per row, each row from a uniformly drawn model."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        X = self._inputs(S, A)
        choice = rng.integers(self.k, size=X.shape[0])
        out = np.empty_like(S)
        for i in range(self.k):
            rows = np.nonzero(choice == i)[0]
            if rows.size == 0:
                continue
            delta, _ = forward_batch(self.spec, self.params[i], X[rows])
            out[rows] = self._finish(S[rows], delta, self.log_stds[i], rng)
        return out

    def predict(self, s: Sequence[float], a: Sequence[float], rng: np.random.Generator) -> np.ndarray:
        s_next = self.predict_batch(np.asarray(s, dtype=np.float64)[None, :],
                                    np.asarray(a, dtype=np.float64)[None, :], rng)[0]
        if not np.all(np.isfinite(s_next)):
            raise NumericError("ensemble produced a non-finite prediction")
        return s_next

    def to_bytes(self) -> bytes:
        sizes = self.spec.layer_sizes
        header = struct.pack(f"<II{len(sizes)}I", self.k, len(sizes), *sizes)
        body = b"".join(params_to_bytes(p) + params_to_bytes(s) for p, s in zip(self.params, self.log_stds))
        return header + body + self.normalizer.to_bytes()

    def load_bytes(self, data: bytes, offset: int = 0) -> int:
        """Replace parameters from a blob produced by `to_bytes`; returns the end offset."""
        try:
            k, n_layers = struct.unpack_from("<II", data, offset)
            offset += 8
            sizes = struct.unpack_from(f"<{n_layers}I", data, offset)
            offset += 4 * n_layers
        except struct.error as exc:
            raise InvalidArgumentError(f"malformed ensemble blob: {exc}") from exc
        if k != self.k or tuple(sizes) != self.spec.layer_sizes:
            raise InvalidArgumentError(
                f"ensemble blob is K={k} {tuple(sizes)}, local ensemble is K={self.k} {self.spec.layer_sizes}")
        params, log_stds = [], []
        for _ in range(k):
            p, offset = params_from_bytes(data, offset)
            s, offset = params_from_bytes(data, offset)
            params.append(p)
            log_stds.append(s)
        self.normalizer, offset = Normalizer.from_bytes(data, offset)
        self.params, self.log_stds = params, log_stds
        return offset


@dataclass(frozen=True)
class EnsembleSettings:
    """Architecture and training knobs of the model-learning side."""

    k: int = 4
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: Activation = Activation.RELU
    lr: float = 1e-3
    batch_size: int = 64
    capacity_trajectories: int = 20
    validation_fraction: float = 0.1
    beta_ema: float = 0.6
    early_stopping: bool = True
    state_clip: float = 100.0
    stochastic_head: bool = False
    start_states: int = 1000

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1 or self.capacity_trajectories < 1 or self.start_states < 1:
            raise InvalidArgumentError("k, batch_size, capacity_trajectories and start_states must be >= 1")
        if not 0.0 <= self.beta_ema < 1.0:
            raise InvalidArgumentError(f"beta_ema must be in [0, 1), got {self.beta_ema}")

    def build(self, obs_dim: int, act_dim: int, seed: int) -> Ensemble:
        return Ensemble(obs_dim, act_dim, k=self.k, hidden_sizes=self.hidden_sizes, activation=self.activation,
                        seed=seed, state_clip=self.state_clip, stochastic_head=self.stochastic_head)


def make_model_optimizers(ensemble: Ensemble, lr: float = 1e-3) -> List[AdamState]:
    size = ensemble.spec.num_params + ensemble.obs_dim
    return [AdamState.fresh(size, lr=lr) for _ in range(ensemble.k)]


def _normalized_split(ensemble: Ensemble, S: np.ndarray, A: np.ndarray,
                      S_next: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = ensemble._inputs(S, A)
    Y = ensemble.normalizer.normalize_target(S_next - S)
    return X, Y


def train_epoch(ensemble: Ensemble, buffer: DatasetBuffer, adam_states: List[AdamState],
                rng: np.random.Generator, batch_size: int = 64) -> np.ndarray:
    """
    One shuffled pass over the training split for every model.

    `adam_states` is updated in place. Returns the per-model training loss,
    the size-weighted mean of the minibatch losses seen before each step.
    """
    S, A, S_next = buffer.train_arrays()
    n = S.shape[0]
    if n == 0:
        raise PreconditionError("train_epoch needs at least one training transition")
    X, Y = _normalized_split(ensemble, S, A, S_next)
    n_params = ensemble.spec.num_params
    losses = np.zeros(ensemble.k)
    for i in range(ensemble.k):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad = ensemble.nll_and_grad(i, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"model {i} produced a non-finite training loss")
            theta = np.concatenate([ensemble.params[i], ensemble.log_stds[i]])
            theta, adam_states[i] = adam_step(adam_states[i], theta, grad)
            ensemble.params[i] = theta[:n_params]
            ensemble.log_stds[i] = np.clip(theta[n_params:], *MODEL_LOG_STD_BOUNDS)
            total += loss * idx.shape[0]
        losses[i] = total / n
    return losses


def validation_loss(ensemble: Ensemble, buffer: DatasetBuffer) -> float:
    """Mean NLL over the validation split, averaged across the K models."""
    S, A, S_next = buffer.validation_arrays()
    if S.shape[0] == 0:
        raise PreconditionError("validation split is empty")
    X, Y = _normalized_split(ensemble, S, A, S_next)
    return float(np.mean([ensemble.nll(i, X, Y) for i in range(ensemble.k)]))


def prediction_error(ensemble: Ensemble, S: np.ndarray, A: np.ndarray, S_next: np.ndarray) -> float:
    """Mean squared error of the normalized mean deltas, averaged across models."""
    X, Y = _normalized_split(ensemble, S, A, S_next)
    return float(np.mean([np.mean((forward_batch(ensemble.spec, p, X)[0] - Y) ** 2) for p in ensemble.params]))


@dataclass(frozen=True)
class ValidationTracker:
    beta: float = 0.6
    ema: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise InvalidArgumentError(f"EMA weight must be in [0, 1), got {self.beta}")


def should_stop(tracker: ValidationTracker, new_val_loss: float) -> Tuple[bool, ValidationTracker]:
    """Stop when the new loss exceeds the running average; then fold it in."""
    if not np.isfinite(new_val_loss):
        raise NumericError("validation loss is not finite")
    if not tracker.initialized:
        return False, replace(tracker, ema=float(new_val_loss), initialized=True)
    stop = new_val_loss > tracker.ema
    ema = tracker.beta * tracker.ema + (1.0 - tracker.beta) * new_val_loss
    return bool(stop), replace(tracker, ema=float(ema))


def reset_tracker_on_new_data(tracker: ValidationTracker) -> ValidationTracker:
    return replace(tracker, ema=0.0, initialized=False)


def predict(ensemble: Ensemble, s: Sequence[float], a: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    return ensemble.predict(s, a, rng)


def stop_epochs(losses: Iterable[float], beta: float) -> List[int]:
    """1-based indices at which should_stop fires for a scripted loss sequence."""
    tracker = ValidationTracker(beta=beta)
    fired = []
    for epoch, loss in enumerate(losses, start=1):
        stop, tracker = should_stop(tracker, loss)
        if stop:
            fired.append(epoch)
    return fired
