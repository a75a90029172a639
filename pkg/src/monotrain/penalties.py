"""Monotonicity penalties built on input gradients.

All estimators return a scalar :class:`Tensor` that stays on the tape, so
its gradient with respect to the model parameters can be taken directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor, log_softmax
from .models import SlicedClassifier, input_gradients, slice_label_gradient, slice_total_gradient

PENALTY_KINDS = ("none", "train", "random", "mixup", "group")
GROUP_GRADIENTS = ("label", "own")


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "none"
    random_samples: int = 1024
    mixup_pairs: int = 1024
    mu: float = 1.0
    box: tuple[np.ndarray, np.ndarray] | None = None
    group_gradient: str = "label"

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"penalty kind must be one of {PENALTY_KINDS}, got '{self.kind}'")
        if self.random_samples < 1 or self.mixup_pairs < 1:
            raise ValueError("sample sizes must be at least 1")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.group_gradient not in GROUP_GRADIENTS:
            raise ValueError(f"group_gradient must be one of {GROUP_GRADIENTS}, got '{self.group_gradient}'")
        if self.box is not None:
            lower, upper = (np.asarray(b, dtype=np.float64) for b in self.box)
            if lower.shape != upper.shape or np.any(lower >= upper):
                raise ValueError("box needs lower < upper in every dimension")
            object.__setattr__(self, "box", (lower, upper))

    def with_box(self, box) -> "PenaltySpec":
        return replace(self, box=box)


def _require_box(box):
    if box is None:
        raise ValueError("a domain box is required for this penalty")
    return box


def uniform_box(box, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points drawn uniformly from the axis-aligned box ``(lower, upper)``."""
    lower, upper = _require_box(box)
    return rng.uniform(lower, upper, size=(n, len(lower)))


def _check_dims(monotone: Sequence[int], width: int) -> list[int]:
    dims = [int(i) for i in monotone]
    if not dims:
        raise ValueError("monotone dimension set is empty")
    for i in dims:
        if not 0 <= i < width:
            raise IndexError(f"monotone dimension {i} out of range for input width {width}")
    return dims


def hinge_penalties(grads: Tensor) -> Tensor:
    """Per-row sum of max(0, -g)^2 over the given gradient columns."""
    return (-grads).clamp_min(0.0).square().sum(axis=1)


def omega_points(model, points, monotone: Sequence[int], create_graph: bool = True) -> Tensor:
    """Mean squared-hinge penalty of negative monotone gradients over ``points``."""
    points = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("penalty needs a nonempty (n, D) point set")
    dims = _check_dims(monotone, points.shape[1])
    g = input_gradients(model, points, dims, create_graph=create_graph)
    return hinge_penalties(g).mean()


def omega_pointwise(model, x, monotone: Sequence[int]) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return omega_points(model, x.reshape(1, -1), monotone)


def omega_train(model, batch, monotone: Sequence[int]) -> Tensor:
    return omega_points(model, batch, monotone)


def omega_random(model, spec: PenaltySpec, monotone: Sequence[int], rng: np.random.Generator) -> Tensor:
    return omega_points(model, uniform_box(spec.box, spec.random_samples, rng), monotone)


def mixup_points(batch, spec: PenaltySpec, rng: np.random.Generator, n_pairs: int | None = None, lam=None) -> np.ndarray:
    """Regularization points from mixing a batch with as many uniform draws.

    The batch of N rows is stacked with N uniform draws from the domain box;
    index pairs (i, j) are drawn uniformly from the 2N x 2N grid (i == j is
    allowed) and each pair gets its own lambda ~ U[0, 1].  The number of
    points is ``min(spec.mixup_pairs, n_pairs)``, where ``n_pairs``
    defaults to the (2N)^2 ordered index pairs available.  ``lam`` overrides
    the sampled mixing weights.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or len(batch) == 0:
        raise ValueError("mixup needs a nonempty (n, D) batch")
    box = _require_box(spec.box)
    n = len(batch)
    noise = uniform_box(box, n, rng)
    pool = np.concatenate([batch, noise], axis=0)
    requested = (2 * n) ** 2 if n_pairs is None else int(n_pairs)
    count = min(spec.mixup_pairs, requested)
    i = rng.integers(0, 2 * n, size=count)
    j = rng.integers(0, 2 * n, size=count)
    weights = rng.uniform(0.0, 1.0, size=count)
    if lam is not None:
        weights = np.broadcast_to(np.asarray(lam, dtype=np.float64), (count,))
    weights = weights[:, None]
    return weights * pool[i] + (1.0 - weights) * pool[j]


def omega_mixup(model, batch, spec: PenaltySpec, monotone: Sequence[int], rng: np.random.Generator) -> Tensor:
    return omega_points(model, mixup_points(batch, spec, rng), monotone)


def omega_group(model: SlicedClassifier, batch, labels, mu: float, gradient: str = "label") -> Tensor:
    """Cross-entropy of the class-slice total gradients scaled by 1/mu.

    With ``gradient="label"`` every slice total differentiates the logit of
    the example's label, so the penalty asks that logit to draw most of its
    sensitivity from its own slice.  ``"own"`` pairs slice k with logit k.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("labels must be a nonempty vector")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels must lie in 0..{model.n_classes - 1}")
    batch = np.asarray(batch, dtype=np.float64)
    if gradient == "label":
        totals = slice_label_gradient(model, batch, labels)
    elif gradient == "own":
        totals = slice_total_gradient(model, batch)
    else:
        raise ValueError(f"group gradient must be one of {GROUP_GRADIENTS}, got '{gradient}'")
    return group_cross_entropy(totals, labels, mu)


def group_cross_entropy(totals: Tensor, labels: np.ndarray, mu: float) -> Tensor:
    logp = log_softmax(totals * (1.0 / mu), axis=1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def compute_penalty(model, spec: PenaltySpec, batch, labels, monotone, rng: np.random.Generator) -> Tensor | None:
    """Dispatch on ``spec.kind``; returns None for ``"none"``."""
    if spec.kind == "none":
        return None
    if spec.kind == "train":
        return omega_train(model, batch, monotone)
    if spec.kind == "random":
        return omega_random(model, spec, monotone, rng)
    if spec.kind == "mixup":
        return omega_mixup(model, batch, spec, monotone, rng)
    return omega_group(model, batch, labels, spec.mu, spec.group_gradient)
