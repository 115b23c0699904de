#!/usr/bin/env python3
"""
Tests for the dense network core: gradients, Adam, densities and byte format
"""
import math

import numpy as np
import pytest

from asyncdyna.errors import InvalidArgumentError, NumericError
from asyncdyna.neural import (Activation, AdamState, MlpSpec, adam_step, backward_batch, forward_batch,
                              gaussian_log_density, init_params, mlp_backward, mlp_forward, params_from_bytes,
                              params_to_bytes, unpack)


def central_difference(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def random_spec(rng, activation=Activation.TANH):
    depth = rng.integers(2, 5)
    sizes = [int(rng.integers(1, 5))] + [int(rng.integers(1, 9)) for _ in range(depth - 2)] + [int(rng.integers(1, 5))]
    return MlpSpec(tuple(sizes), activation)


def test_num_params_and_layout():
    spec = MlpSpec((3, 4, 2))
    assert spec.num_params == 3 * 4 + 4 + 4 * 2 + 2
    params = np.arange(spec.num_params, dtype=np.float64)
    (W1, b1), (W2, b2) = unpack(spec, params)
    assert W1.shape == (3, 4) and W1[0, 1] == 1.0
    assert b1.tolist() == [12.0, 13.0, 14.0, 15.0]
    assert W2.shape == (4, 2) and b2.tolist() == [24.0, 25.0]


def test_forward_matches_hand_computation():
    spec = MlpSpec((2, 2, 1), Activation.RELU)
    # W1 = identity, b1 = (0, -1), W2 = (1, 1), b2 = 0.5
    params = np.array([1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0, 0.5])
    out = mlp_forward(spec, params, [2.0, 3.0])
    assert out == pytest.approx([2.0 + 2.0 + 0.5])


def test_parameter_gradients_match_finite_differences_for_random_specs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        spec = random_spec(rng)
        params = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.num_params)
        X = rng.standard_normal((3, spec.input_dim))
        upstream = rng.standard_normal((3, spec.output_dim))

        def objective(p):
            return float(np.sum(upstream * forward_batch(spec, p, X)[0]))

        _, cache = forward_batch(spec, params, X)
        analytic, _ = backward_batch(spec, params, cache, upstream)
        assert relative_error(analytic, central_difference(objective, params)) < 1e-5


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    spec = MlpSpec((4, 8, 8, 4), Activation.TANH)
    params = init_params(spec, rng)
    x = rng.standard_normal(4)
    upstream = rng.standard_normal(4)
    _, input_grad = mlp_backward(spec, params, x, upstream)
    numeric = central_difference(lambda v: float(upstream @ mlp_forward(spec, params, v)), x)
    assert relative_error(input_grad, numeric) < 1e-5


def test_relu_gradients_match_away_from_kinks():
    rng = np.random.default_rng(2)
    spec = MlpSpec((3, 6, 2), Activation.RELU)
    params = init_params(spec, rng)
    X = rng.standard_normal((5, 3))
    upstream = rng.standard_normal((5, 2))
    _, cache = forward_batch(spec, params, X)
    analytic, _ = backward_batch(spec, params, cache, upstream)
    numeric = central_difference(lambda p: float(np.sum(upstream * forward_batch(spec, p, X)[0])), params)
    assert relative_error(analytic, numeric) < 1e-5


def test_forward_rejects_wrong_shapes():
    spec = MlpSpec((3, 2))
    with pytest.raises(InvalidArgumentError):
        mlp_forward(spec, np.zeros(spec.num_params), [1.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        mlp_forward(spec, np.zeros(spec.num_params + 1), [1.0, 2.0, 3.0])


def test_adam_first_step_moves_by_learning_rate():
    state = AdamState.fresh(3, lr=0.01)
    params, state = adam_step(state, np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert params == pytest.approx([-0.01, 0.01, 0.0], abs=1e-8)
    assert state.t == 1


def test_adam_minimizes_a_quadratic():
    state = AdamState.fresh(2, lr=0.05)
    x = np.array([3.0, -2.0])
    for _ in range(2000):
        x, state = adam_step(state, x, 2.0 * x)
    assert np.abs(x).max() < 1e-2


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericError):
        adam_step(AdamState.fresh(2), np.zeros(2), np.array([1.0, math.nan]))


def test_gaussian_log_density_standard_normal():
    assert gaussian_log_density([0.0], [0.0], [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi))
    value = gaussian_log_density([1.0, 0.0], [math.log(2.0), 0.0], [3.0, 1.0])
    expected = (-math.log(2.0) - 0.5 * math.log(2 * math.pi) - 0.5) + (-0.5 * math.log(2 * math.pi) - 0.5)
    assert value == pytest.approx(expected)


def test_params_bytes_layout_and_offsets():
    a = np.array([1.5, -2.0])
    b = np.array([3.25])
    data = params_to_bytes(a) + params_to_bytes(b)
    assert len(data) == 4 + 16 + 4 + 8
    assert data[:4] == (2).to_bytes(4, "little")
    first, offset = params_from_bytes(data)
    second, end = params_from_bytes(data, offset)
    assert first.tolist() == [1.5, -2.0]
    assert second.tolist() == [3.25]
    assert end == len(data)


def test_params_from_bytes_rejects_truncation():
    data = params_to_bytes(np.ones(4))
    with pytest.raises(InvalidArgumentError):
        params_from_bytes(data[:-1])
    with pytest.raises(InvalidArgumentError):
        params_from_bytes(b"\x01")
