"""L-infinity projected gradient ascent on the classification loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, grad
from .trainer import loss


@dataclass(frozen=True)
class AttackSpec:
    """PGD settings.  ``eps`` may be a scalar or one budget per input dimension."""

    eps: float | np.ndarray = 0.3
    steps: int = 10
    step_size: float | np.ndarray | None = None
    box: tuple[np.ndarray, np.ndarray] | None = None
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if np.any(np.asarray(self.eps) < 0):
            raise ValueError("eps must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        # a zero step is harmless along dimensions whose budget is also zero
        if self.steps > 0 and np.any((np.asarray(self.resolved_step_size) <= 0) & (np.asarray(self.eps) > 0)):
            raise ValueError("step size must be positive when steps > 0")

    @property
    def resolved_step_size(self):
        return np.asarray(self.eps) / 4.0 if self.step_size is None else self.step_size


def input_loss_gradient(model, x: np.ndarray, y: np.ndarray, task: str = "classification") -> tuple[np.ndarray, float]:
    """Gradient of the summed per-example loss with respect to the inputs."""
    leaf = Tensor(x, requires_grad=True)
    total = loss(model(leaf), y, task, reduction="sum")
    g = grad(total, [leaf])[0]
    return g.data, total.item()


def pgd_linf(model, x, y, spec: AttackSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Perturb each row of ``x`` within an L-inf ball to raise its loss.

    Each step moves by ``step_size * sign(grad)`` and then projects back onto
    the eps-ball around the clean input and onto ``spec.box``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) != len(x2):
        raise ValueError(f"{len(x2)} inputs but {len(y)} labels")
    if x2.shape[1] != model.input_width:
        raise ValueError(f"expected inputs of width {model.input_width}, got {x2.shape[1]}")
    eps = np.broadcast_to(np.asarray(spec.eps, dtype=np.float64), (x2.shape[1],))
    lower, upper = x2 - eps, x2 + eps
    if spec.box is not None:
        lower = np.maximum(lower, spec.box[0])
        upper = np.minimum(upper, spec.box[1])
        # a clean point outside the box keeps its own coordinate as the only feasible value
        lower = np.minimum(lower, x2)
        upper = np.maximum(upper, x2)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    adv = x2.copy()
    if spec.random_start and spec.steps > 0:
        adv = np.clip(adv + rng.uniform(-1.0, 1.0, size=adv.shape) * eps, lower, upper)
    step = np.asarray(spec.resolved_step_size, dtype=np.float64)
    for _ in range(spec.steps):
        g, _ = input_loss_gradient(model, adv, y)
        adv = np.clip(adv + step * np.sign(g), lower, upper)
    return adv[0] if single else adv
