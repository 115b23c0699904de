"""
Dense network numeric core.

Forward pass, exact reverse-mode gradients, Adam, Gaussian log-densities and
the flat parameter byte format. Everything learned in asyncdyna (dynamics
models, policy, value function) is a flat float64 vector interpreted through
an MlpSpec.

Parameter layout, per layer in order: weight matrix of shape
(fan_in, fan_out) row-major, then the bias of length fan_out.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import StrEnum
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, NumericError

LOG_2PI = math.log(2.0 * math.pi)


class Activation(StrEnum):
    TANH = "tanh"
    RELU = "relu"


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes from input to output; hidden layers use `activation`."""

    layer_sizes: Tuple[int, ...]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 2:
            raise InvalidArgumentError("an MlpSpec needs at least an input and an output size")
        if any(n < 1 for n in sizes):
            raise InvalidArgumentError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


def _check_params(spec: MlpSpec, params: np.ndarray) -> None:
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise InvalidArgumentError(
            f"parameter vector has shape {params.shape}, spec {spec.layer_sizes} needs {spec.num_params}")


def unpack(spec: MlpSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views."""
    _check_params(spec, params)
    layers = []
    offset = 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = params[offset:offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = params[offset:offset + n_out]
        offset += n_out
        layers.append((W, b))
    return layers


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-limit, limit, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks).astype(np.float64)


def _activate(activation: Activation, z: np.ndarray) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(activation: Activation, z: np.ndarray) -> np.ndarray:
    if activation is Activation.TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(np.float64)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def forward_batch(spec: MlpSpec, params: np.ndarray, X: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Forward pass over a (batch, input_dim) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise InvalidArgumentError(f"input has shape {X.shape}, expected (batch, {spec.input_dim})")
    layers = unpack(spec, params)
    cache = ForwardCache()
    out = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        cache.inputs.append(out)
        z = out @ W + b
        cache.pre_activations.append(z)
        out = z if i == last else _activate(spec.activation, z)
    return out, cache


def backward_batch(spec: MlpSpec, params: np.ndarray, cache: ForwardCache,
                   upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of sum_rows <upstream_row, output_row>.

    Returns:
        (flat parameter gradient, input gradient of shape (batch, input_dim))
    """
    layers = unpack(spec, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.pre_activations[-1].shape:
        raise InvalidArgumentError(
            f"upstream gradient has shape {upstream.shape}, expected {cache.pre_activations[-1].shape}")
    grads: List[np.ndarray] = []
    d_out = upstream
    last = len(layers) - 1
    for i in range(last, -1, -1):
        W, _ = layers[i]
        dz = d_out if i == last else d_out * _activation_grad(spec.activation, cache.pre_activations[i])
        grads.append(dz.sum(axis=0))
        grads.append((cache.inputs[i].T @ dz).ravel())
        d_out = dz @ W.T
    grads.reverse()
    return np.concatenate(grads), d_out


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise InvalidArgumentError(f"input has length {x.shape}, expected {spec.input_dim}")
    out, _ = forward_batch(spec, params, x[None, :])
    return out[0]


def mlp_backward(spec: MlpSpec, params: np.ndarray, x: Sequence[float],
                 upstream_grad: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Exact gradients of <upstream_grad, mlp_forward(spec, params, x)>."""
    x = np.asarray(x, dtype=np.float64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise InvalidArgumentError(f"input has length {x.shape}, expected {spec.input_dim}")
    if upstream_grad.shape != (spec.output_dim,):
        raise InvalidArgumentError(
            f"upstream gradient has shape {upstream_grad.shape}, expected ({spec.output_dim},)")
    _, cache = forward_batch(spec, params, x[None, :])
    param_grad, input_grad = backward_batch(spec, params, cache, upstream_grad[None, :])
    return param_grad, input_grad[0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step on `grad`."""
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != grad.shape:
        raise InvalidArgumentError(
            f"adam shapes disagree: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m=m, v=v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                 eps=state.eps)


def gaussian_log_density(mean: Sequence[float], log_std: Sequence[float], x: Sequence[float]) -> float:
    """Log-density of a diagonal Gaussian at x."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (mean.shape == log_std.shape == x.shape) or mean.ndim != 1:
        raise InvalidArgumentError(
            f"gaussian_log_density shapes disagree: {mean.shape}, {log_std.shape}, {x.shape}")
    return float(gaussian_log_density_rows(mean[None, :], log_std, x[None, :])[0])


def gaussian_log_density_rows(mean: np.ndarray, log_std: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise diagonal Gaussian log-density; `log_std` broadcasts over rows."""
    z = (x - mean) / np.exp(log_std)
    return np.sum(-log_std - 0.5 * LOG_2PI - 0.5 * z * z, axis=-1)


_LENGTH = struct.Struct("<I")


def params_to_bytes(params: np.ndarray) -> bytes:
    """32-bit little-endian length followed by little-endian float64 values."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1:
        raise InvalidArgumentError("only flat parameter vectors can be serialized")
    return _LENGTH.pack(params.shape[0]) + params.astype("<f8").tobytes()


def params_from_bytes(data: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one vector starting at `offset`; returns (vector, next offset)."""
    if len(data) < offset + _LENGTH.size:
        raise InvalidArgumentError("truncated parameter blob: missing length prefix")
    (n,) = _LENGTH.unpack_from(data, offset)
    start = offset + _LENGTH.size
    end = start + 8 * n
    if len(data) < end:
        raise InvalidArgumentError(f"truncated parameter blob: need {end} bytes, have {len(data)}")
    values = np.frombuffer(data, dtype="<f8", count=n, offset=start).astype(np.float64)
    return values, end
