"""Monotonicity audits, prediction metrics, entropy detection, AUC and sphere analytics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .datagen import Dataset
from .models import SlicedClassifier, activation_totals, input_gradients, predict
from .penalties import uniform_box

AUDIT_CHUNK = 4096


def violation_mask(model, points, monotone: Sequence[int], slack: float = 0.0) -> np.ndarray:
    """True where some monotone partial derivative is below ``-slack``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("audit needs a nonempty (n, D) point set")
    dims = list(monotone)
    out = np.empty(len(points), dtype=bool)
    for lo in range(0, len(points), AUDIT_CHUNK):
        g = input_gradients(model, points[lo:lo + AUDIT_CHUNK], dims, create_graph=False).data
        out[lo:lo + AUDIT_CHUNK] = g.min(axis=1) < -slack
    return out


def rho_hat(model, points, monotone: Sequence[int], slack: float = 0.0) -> float:
    """Fraction of points where monotonicity along ``monotone`` is violated."""
    return float(violation_mask(model, points, monotone, slack).mean())


def rho_random(model, box, monotone: Sequence[int], rng: np.random.Generator, n: int = 10_000, slack: float = 0.0) -> float:
    return rho_hat(model, uniform_box(box, n, rng), monotone, slack)


def regression_rmse(model, data: Dataset) -> float:
    if data.task != "regression":
        raise ValueError("RMSE needs a regression dataset")
    pred = predict(model, data.features)[:, 0]
    return float(np.sqrt(np.mean((pred - data.targets) ** 2)))


def predicted_labels(model, features) -> np.ndarray:
    scores = predict(model, features)
    if scores.shape[1] == 1:
        return (scores[:, 0] > 0).astype(np.int64)
    return scores.argmax(axis=1)


def classification_accuracy(model, data: Dataset) -> float:
    if data.task != "classification":
        raise ValueError("accuracy needs a classification dataset")
    return float(np.mean(predicted_labels(model, data.features) == data.targets))


def prediction_metric(model, data: Dataset) -> float:
    return regression_rmse(model, data) if data.task == "regression" else classification_accuracy(model, data)


def total_activations(model: SlicedClassifier, features) -> np.ndarray:
    with no_grad():
        a = model.hidden(Tensor(np.asarray(features, dtype=np.float64))).data
    return activation_totals(a, model.slices)


def total_activation_accuracy(model: SlicedClassifier, data: Dataset) -> float:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    totals = total_activations(model, data.features)
    return float(np.mean(totals.argmax(axis=1) == data.targets))


def normalized_entropy(T) -> np.ndarray | float:
    """Entropy of softmax(T) divided by log K; rows are scored independently."""
    T = np.asarray(T, dtype=np.float64)
    single = T.ndim == 1
    T = np.atleast_2d(T)
    K = T.shape[1]
    if K < 2:
        raise ValueError("normalized entropy needs at least two categories")
    z = T - T.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1) / math.log(K)
    h = np.clip(h, 0.0, 1.0)
    return float(h[0]) if single else h


def detect(T, tau: float) -> bool | np.ndarray:
    """Flag inputs whose normalized entropy exceeds ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return normalized_entropy(T) > tau


def auc_roc(scores_negative, scores_positive) -> float:
    """P(positive score > negative score), ties counting one half."""
    neg = np.sort(np.asarray(scores_negative, dtype=np.float64).ravel())
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ValueError("both score lists must be nonempty")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (neg.size * pos.size))


# -- sphere analytics --------------------------------------------------


def _check_sphere_args(n: int, r: float) -> None:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= r <= 1.0:
        raise ValueError("r must lie in [0, 1]")


def sphere_prob_uniform(n: int, r: float) -> float:
    """P(|x| > r) for x uniform in the unit n-ball."""
    _check_sphere_args(n, r)
    return 1.0 - r**n


def sphere_prob_mixup(n: int, r: float) -> float:
    """The product form (1 - r^n)(1 - r) for x = lambda * y.

    This treats |y| > r and lambda > r as if they were jointly sufficient;
    it upper-bounds the true probability (see :func:`sphere_prob_mixup_exact`).
    """
    _check_sphere_args(n, r)
    return (1.0 - r**n) * (1.0 - r)


def sphere_prob_mixup_exact(n: int, r: float) -> float:
    """P(lambda * |y| > r) with y uniform in the unit n-ball, lambda ~ U[0, 1].

    |y| has density n t^(n-1) on [0, 1], so the probability is
    the integral over t in (r, 1) of (1 - r/t) n t^(n-1).
    """
    _check_sphere_args(n, r)
    if r == 0.0:
        return 1.0
    if n == 1:
        return 1.0 - r + r * math.log(r)
    return (1.0 - r**n) - r * n / (n - 1) * (1.0 - r ** (n - 1))


def sample_unit_ball(n: int, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the unit n-ball: Gaussian direction, radius U^(1/n)."""
    direction = rng.normal(size=(draws, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(size=draws) ** (1.0 / n)
    return direction * radius[:, None]


def sphere_prob_monte_carlo(n: int, r: float, draws: int, mode: str, rng: np.random.Generator, chunk: int = 200_000) -> float:
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if mode not in ("uniform", "mixup"):
        raise ValueError("mode must be 'uniform' or 'mixup'")
    hits = 0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        x = sample_unit_ball(n, m, rng)
        if mode == "mixup":
            x *= rng.uniform(size=m)[:, None]
        hits += int(np.count_nonzero(np.linalg.norm(x, axis=1) > r))
        done += m
    return hits / draws


def binomial_sigma(p: float, draws: int) -> float:
    return math.sqrt(p * (1.0 - p) / draws)


# -- reports -----------------------------------------------------------


@dataclass
class MetricsReport:
    rho_random: float | None = None
    rho_train: float | None = None
    rho_test: float | None = None
    train_metric: float | None = None
    valid_metric: float | None = None
    test_metric: float | None = None
    metric_name: str = "rmse"
    total_activation_accuracy: float | None = None
    detection_auc: float | None = None
    sample_sizes: dict[str, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name in ("rho_random", "rho_train", "rho_test", "total_activation_accuracy", "detection_auc"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def audit(model, train: Dataset, test: Dataset, box, monotone, rng: np.random.Generator, n_random: int = 10_000, slack: float = 0.0) -> dict[str, float]:
    """The three rho estimates: uniform draws from ``box``, the train rows, the test rows."""
    return {
        "rho_random": rho_random(model, box, monotone, rng, n_random, slack),
        "rho_train": rho_hat(model, train.features, monotone, slack),
        "rho_test": rho_hat(model, test.features, monotone, slack),
    }
