"""Penalized empirical risk minimization with validation checkpointing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, concatenate, grad, log_softmax, no_grad
from .datagen import Dataset
from .metrics import prediction_metric
from .models import get_weights, set_weights
from .penalties import PenaltySpec, compute_penalty

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def loss(prediction: Tensor, target, task: str, reduction: str = "mean") -> Tensor:
    """Squared error for regression; softmax cross-entropy for classification.

    A single-column classifier output is read as the logit of class 1
    against a fixed zero logit for class 0.
    """
    target = np.asarray(target)
    n = prediction.shape[0]
    if len(target) != n:
        raise ValueError(f"{n} predictions but {len(target)} targets")
    if task == "regression":
        if prediction.ndim != 2 or prediction.shape[1] != 1:
            raise ValueError("regression expects a single output column")
        per = (prediction[:, 0] - Tensor(target.astype(np.float64))).square()
    elif task == "classification":
        labels = target.astype(np.int64)
        if prediction.shape[1] == 1:
            zeros = Tensor(np.zeros((n, 1)))
            prediction = concatenate([zeros, prediction], axis=1)
        if labels.min() < 0 or labels.max() >= prediction.shape[1]:
            raise ValueError("label out of range for the model output")
        per = -log_softmax(prediction, axis=1)[np.arange(n), labels]
    else:
        raise ValueError(f"unknown task '{task}'")
    if reduction == "sum":
        return per.sum()
    return per.mean()


# -- optimizers --------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.step + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(t, m, v)


@dataclass
class SgdState:
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: SgdState, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> tuple[list[np.ndarray], SgdState]:
    grads = [g + weight_decay * p if weight_decay else g for p, g in zip(params, grads)]
    if momentum:
        prev = state.velocity or [np.zeros_like(p) for p in params]
        velocity = [momentum * b + g for b, g in zip(prev, grads)]
        return [p - lr * b for p, b in zip(params, velocity)], SgdState(velocity)
    return [p - lr * g for p, g in zip(params, grads)], state


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


# -- training ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    gamma: float = 1e4
    optimizer: str = "adam"
    lr: float = 5e-3
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = 100.0
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    checkpoint: str = "best"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got '{self.optimizer}'")
        if self.checkpoint not in ("best", "last"):
            raise ValueError(f"checkpoint must be 'best' or 'last', got '{self.checkpoint}'")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor**drops


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    best_epoch: int
    best_metric: float


def _better(task: str, new: float, best: float | None) -> bool:
    if best is None:
        return True
    return new < best if task == "regression" else new > best


def train_step(model, x: np.ndarray, y: np.ndarray, task: str, config: TrainConfig, monotone, rng: np.random.Generator):
    """Loss, penalty value and parameter gradients for one mini-batch."""
    params = model.parameters()
    data_loss = loss(model(Tensor(x)), y, task)
    penalty_value = 0.0
    objective = data_loss
    omega = compute_penalty(model, config.penalty, x, y, monotone, rng)
    if omega is not None:
        penalty_value = omega.item()
        # with gamma == 0 the penalty is only logged, so the trajectory matches plain ERM
        if config.gamma > 0:
            objective = data_loss + omega * config.gamma
    grads = [g.data for g in grad(objective, params)]
    return data_loss.item(), penalty_value, grads


def train(model, train_set: Dataset, valid_set: Dataset, config: TrainConfig, history_path=None) -> TrainResult:
    """Minimize loss + gamma * penalty; keep the epoch with the best validation metric."""
    if train_set.task != valid_set.task:
        raise ValueError("train and validation tasks differ")
    if train_set.dim != model.input_width:
        raise ValueError(f"model expects {model.input_width} features, data has {train_set.dim}")
    penalty = config.penalty
    if penalty.kind in ("random", "mixup") and penalty.box is None:
        penalty = penalty.with_box(train_set.box)
        config = replace(config, penalty=penalty)
    if penalty.kind in ("train", "random", "mixup") and not train_set.monotone:
        raise ValueError("penalty needs a nonempty monotone dimension set")

    shuffle_seq, penalty_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    penalty_rng = np.random.default_rng(penalty_seq)
    x_all, y_all = np.asarray(train_set.features), np.asarray(train_set.targets)
    n = len(x_all)
    adam = AdamState()
    sgd = SgdState()
    history: list[dict] = []
    best_metric = None
    best_epoch = -1
    best_weights = get_weights(model)
    sink = Path(history_path).open("w") if history_path else None

    try:
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(n)
            lr = config.lr_at(epoch)
            losses, omegas, objectives = [], [], []
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                try:
                    batch_loss, omega, grads = train_step(model, x_all[idx], y_all[idx], train_set.task, config, train_set.monotone, penalty_rng)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, batch at row {lo}: {exc}") from exc
                if not (math.isfinite(batch_loss) and math.isfinite(omega)):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite loss {batch_loss} / penalty {omega}")
                grads = clip_global_norm(grads, config.clip_norm)
                weights = get_weights(model)
                if config.optimizer == "adam":
                    weights, adam = adam_step(weights, grads, adam, lr)
                else:
                    weights, sgd = sgd_step(weights, grads, sgd, lr, config.momentum, config.weight_decay)
                set_weights(model, weights)
                losses.append(batch_loss)
                omegas.append(omega)
                objectives.append(batch_loss + config.gamma * omega)
            metric = prediction_metric(model, valid_set)
            record = {
                "epoch": epoch,
                "loss": float(np.mean(losses)) if losses else 0.0,
                "omega": float(np.mean(omegas)) if omegas else 0.0,
                "objective": float(np.mean(objectives)) if objectives else 0.0,
                "gamma": config.gamma,
                "valid_metric": metric,
                "lr": lr,
            }
            history.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
            if config.checkpoint == "last" or _better(train_set.task, metric, best_metric):
                best_metric, best_epoch = metric, epoch
                best_weights = get_weights(model)
            log.debug("epoch %d loss %.5g omega %.5g valid %.5g", epoch, record["loss"], record["omega"], metric)
    finally:
        if sink:
            sink.close()

    set_weights(model, best_weights)
    if best_metric is None:
        best_metric = prediction_metric(model, valid_set)
    return TrainResult(model, history, best_epoch, best_metric)


def batch_objective(model, x, y, task, config: TrainConfig, monotone, rng) -> float:
    """Recompute loss + gamma * penalty on one batch without touching the model."""
    with no_grad():
        data_loss = loss(model(Tensor(np.asarray(x, dtype=np.float64))), y, task).item()
    omega = compute_penalty(model, config.penalty, x, y, monotone, rng)
    return data_loss + config.gamma * (omega.item() if omega is not None else 0.0)
