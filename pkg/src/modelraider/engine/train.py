"""Adam training loop with deterministic seeding.

Training copies the model, updates only trainable layers, and is
bit-reproducible: the same (model, data, config, seed) always yields
identical parameters. Optimizer state lives in float64 for the run and
is discarded afterwards; parameters are rounded to float32 after every
step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .augment import augment
from .model import F32, Model, EngineError
from .ops import _param_gradients_f64, evaluate

ADAM_EPSILON = 1e-8


class TrainingDivergedError(EngineError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")


@dataclass
class LabeledDataset:
    """Images with class indices; images share one shape."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(np.stack(list(self.images))
                                           if isinstance(self.images, (list, tuple))
                                           else self.images, dtype=F32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx])

    def of_class(self, label: int) -> np.ndarray:
        return self.images[self.labels == label]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


StopFn = Callable[[Model, EpochStats], bool]


def train(
    model: Model,
    data: LabeledDataset,
    cfg: TrainConfig,
    stop_when: Optional[StopFn] = None,
) -> tuple[Model, list[EpochStats]]:
    """Train a copy of ``model`` on ``data``; returns (model, history).

    Only layers flagged in ``trainable_mask`` are updated. History holds
    loss/accuracy over the unaugmented training set after each epoch.
    ``stop_when`` is consulted after each epoch and ends training early
    when it returns True.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if data.labels.max() >= model.num_classes:
        raise ValueError("label out of range for this model")
    work = model.copy()
    if cfg.epochs == 0:
        return work, []

    rng = np.random.default_rng(cfg.seed)
    m_state: dict[tuple[int, str], np.ndarray] = {}
    v_state: dict[tuple[int, str], np.ndarray] = {}
    step = 0
    history: list[EpochStats] = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = data.images[idx]
            if cfg.augment:
                xb = np.stack([augment(im, rng) for im in xb])
            grads, loss = _param_gradients_f64(work, xb, data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            step += 1
            bc1 = 1.0 - cfg.beta1 ** step
            bc2 = 1.0 - cfg.beta2 ** step
            for li, layer_grads in grads.items():
                spec = work.layers[li]
                for name, g in layer_grads.items():
                    key = (li, name)
                    if key not in m_state:
                        m_state[key] = np.zeros_like(g)
                        v_state[key] = np.zeros_like(g)
                    m = m_state[key]
                    v = v_state[key]
                    m *= cfg.beta1
                    m += (1.0 - cfg.beta1) * g
                    v *= cfg.beta2
                    v += (1.0 - cfg.beta2) * np.square(g)
                    update = (cfg.learning_rate * (m / bc1)
                              / (np.sqrt(v / bc2) + ADAM_EPSILON))
                    spec.params[name] = (
                        spec.params[name].astype(np.float64) - update
                    ).astype(F32)
        loss, accuracy = evaluate(work, data.images, data.labels)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        stats = EpochStats(epoch, loss, accuracy)
        history.append(stats)
        if stop_when is not None and stop_when(work, stats):
            break
    return work, history
