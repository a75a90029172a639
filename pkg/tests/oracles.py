"""Independent reference computations used across the test suite."""

from __future__ import annotations

import numpy as np

from monotrain.models import get_weights, set_weights


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Gradient of the scalar function ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f(x)
        flat[i] = keep - step
        down = f(x)
        flat[i] = keep
        g[i] = (up - down) / (2 * step)
    return out


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def parameter_difference(model, objective, step: float = 1e-5) -> list[np.ndarray]:
    """Finite-difference gradient of ``objective(model)`` over every parameter array."""
    base = get_weights(model)
    result = []
    for k, w in enumerate(base):
        def f(v, k=k):
            trial = [b.copy() for b in base]
            trial[k] = v
            set_weights(model, trial)
            return objective(model)
        result.append(central_difference(f, w, step))
    set_weights(model, base)
    return result


def brute_force_auc(neg, pos) -> float:
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(neg) * len(pos))


def min_abs_preactivation(model, x: np.ndarray) -> float:
    """Smallest |pre-activation| over hidden units of a plain MLP, to keep FD away from ReLU kinks."""
    h = np.atleast_2d(x)
    smallest = np.inf
    for layer in model.layers[:-1]:
        z = h @ layer.weight.data + layer.bias.data
        smallest = min(smallest, float(np.abs(z).min()))
        h = np.maximum(z, 0.0) if model.activation == "relu" else np.tanh(z)
    return smallest


def dense(weight, bias=None):
    from monotrain.autodiff import Tensor
    from monotrain.models import Dense

    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Dense(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True))


def linear_model(w, bias: float = 0.0):
    """h(x) = w . x + bias as a one-layer MlpModel."""
    from monotrain.models import MlpModel

    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    return MlpModel([dense(w, [bias])])


class Polynomial:
    """h(x) = sum_i c_i * x_i**2 written directly on the tape; a stand-in for hand examples."""

    def __init__(self, coefficients):
        self.c = np.asarray(coefficients, dtype=np.float64)
        self.input_width = len(self.c)
        self.output_width = 1

    def __call__(self, x):
        from monotrain.autodiff import Tensor

        return (x * x * Tensor(self.c)).sum(axis=1, keepdims=True)
