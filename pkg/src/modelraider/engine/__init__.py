"""Deterministic small neural-network engine.

Provides forward inference, backpropagation (parameter and input
gradients), Adam training, and image augmentation for the seven layer
kinds used by on-device image classifiers in this project.
"""

from .augment import augment, flip_horizontal, rotate90
from .model import (
    F32,
    KINDS,
    PARAMETRIC_KINDS,
    EngineError,
    LayerSpec,
    Model,
    ShapeMismatchError,
    conv2d,
    dense,
    depthwise_conv2d,
    flatten,
    global_avg_pool,
    relu6,
    softmax,
)
from .ops import (
    evaluate,
    forward,
    forward_logits,
    input_gradient,
    input_gradient_from_logits,
    loss_sce,
    param_gradients,
    predict,
    predict_batch,
)
from .train import (
    EpochStats,
    LabeledDataset,
    TrainConfig,
    TrainingDivergedError,
    train,
)

__all__ = [
    "F32",
    "KINDS",
    "PARAMETRIC_KINDS",
    "EngineError",
    "EpochStats",
    "LabeledDataset",
    "LayerSpec",
    "Model",
    "ShapeMismatchError",
    "TrainConfig",
    "TrainingDivergedError",
    "augment",
    "conv2d",
    "dense",
    "depthwise_conv2d",
    "evaluate",
    "flatten",
    "flip_horizontal",
    "forward",
    "forward_logits",
    "global_avg_pool",
    "input_gradient",
    "input_gradient_from_logits",
    "loss_sce",
    "param_gradients",
    "predict",
    "predict_batch",
    "relu6",
    "rotate90",
    "softmax",
    "train",
]
