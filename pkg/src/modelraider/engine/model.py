"""Layered network representation used across the pipeline.

A model is an ordered stack of layers over float32 parameters. Image
tensors are plain numpy arrays in HWC layout; batches prepend a leading
axis. Parameters are stored as float32 so that byte-level comparisons
between models are meaningful; arithmetic inside the engine runs in
float64 and results are rounded back to float32 at the API boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

F32 = np.float32

KINDS = (
    "conv2d",
    "depthwise-conv2d",
    "dense",
    "relu6",
    "softmax",
    "global-avg-pool",
    "flatten",
)

# Layer kinds that carry parameters ("weights", optionally "bias").
PARAMETRIC_KINDS = frozenset({"conv2d", "depthwise-conv2d", "dense"})


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeMismatchError(EngineError):
    """A layer received an input incompatible with its declared shapes.

    ``layer`` is the identifier of the offending layer, or ``"input"``
    when the batch itself does not match the model's input shape.
    """

    def __init__(self, layer: str, detail: str):
        self.layer = layer
        self.detail = detail
        super().__init__(f"shape mismatch at layer {layer!r}: {detail}")


def _as_param(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=F32)
    return arr


@dataclass
class LayerSpec:
    """One layer: identifier, kind, declared output shape and parameters.

    ``output_shape`` excludes the batch axis. Parameter arrays are kept
    in a name -> float32 ndarray mapping whose insertion order is the
    canonical serialization order ("weights" before "bias").
    """

    identifier: str
    kind: str
    output_shape: tuple[int, ...]
    dtype: str = "f32"
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.output_shape = tuple(int(d) for d in self.output_shape)
        self.params = {name: _as_param(v) for name, v in self.params.items()}

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            identifier=self.identifier,
            kind=self.kind,
            output_shape=self.output_shape,
            dtype=self.dtype,
            params={name: arr.copy() for name, arr in self.params.items()},
        )

    def param_bytes(self) -> int:
        return sum(arr.nbytes for arr in self.params.values())


def conv2d(identifier, weights, bias, output_shape) -> LayerSpec:
    """Standard convolution; weights [kh, kw, c_in, c_out], bias [c_out]."""
    return LayerSpec(identifier, "conv2d", tuple(output_shape),
                     params={"weights": weights, "bias": bias})


def depthwise_conv2d(identifier, weights, bias, output_shape) -> LayerSpec:
    """Per-channel convolution; weights [kh, kw, c], bias [c]."""
    return LayerSpec(identifier, "depthwise-conv2d", tuple(output_shape),
                     params={"weights": weights, "bias": bias})


def dense(identifier, weights, bias) -> LayerSpec:
    """Fully connected layer; weights [d_in, d_out], bias [d_out]."""
    weights = _as_param(weights)
    return LayerSpec(identifier, "dense", (int(weights.shape[1]),),
                     params={"weights": weights, "bias": bias})


def relu6(identifier, output_shape) -> LayerSpec:
    return LayerSpec(identifier, "relu6", tuple(output_shape))


def softmax(identifier, num_classes) -> LayerSpec:
    return LayerSpec(identifier, "softmax", (int(num_classes),))


def global_avg_pool(identifier, channels) -> LayerSpec:
    return LayerSpec(identifier, "global-avg-pool", (int(channels),))


def flatten(identifier, size) -> LayerSpec:
    return LayerSpec(identifier, "flatten", (int(size),))


@dataclass
class Model:
    """Ordered layer stack with a per-layer trainable mask.

    The mask marks which layers the optimizer may update; frozen layers
    form a prefix (every trainable layer is followed only by trainable
    layers). Inference treats a model as immutable; training operates
    on a private copy.
    """

    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    num_classes: int
    trainable_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.num_classes = int(self.num_classes)
        if not self.trainable_mask:
            self.trainable_mask = [False] * len(self.layers)

    def copy(self) -> "Model":
        return Model(
            layers=[spec.copy() for spec in self.layers],
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            trainable_mask=list(self.trainable_mask),
        )

    def with_mask(self, mask: list[bool]) -> "Model":
        if len(mask) != len(self.layers):
            raise ValueError("mask length must equal layer count")
        return replace(self, trainable_mask=list(mask))

    def layer(self, identifier: str) -> LayerSpec:
        for spec in self.layers:
            if spec.identifier == identifier:
                return spec
        raise KeyError(identifier)

    def frozen_layer_count(self) -> int:
        n = 0
        for flag in self.trainable_mask:
            if flag:
                break
            n += 1
        return n

    def validate(self) -> None:
        """Check structural invariants; raises ValueError on violation."""
        if not self.layers:
            raise ValueError("no layers")
        seen = set()
        for spec in self.layers:
            if spec.identifier in seen:
                raise ValueError(f"duplicate layer identifier {spec.identifier!r}")
            seen.add(spec.identifier)
            if spec.kind not in KINDS:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            if spec.kind not in PARAMETRIC_KINDS and spec.params:
                raise ValueError(f"layer {spec.identifier!r} of kind {spec.kind} "
                                 "must not carry parameters")
        last = self.layers[-1]
        if last.kind != "softmax":
            raise ValueError("last layer must be softmax")
        if last.output_shape != (self.num_classes,):
            raise ValueError("softmax output must match num_classes")
        if len(self.trainable_mask) != len(self.layers):
            raise ValueError("trainable_mask length must equal layer count")
        trainable_seen = False
        for flag in self.trainable_mask:
            if trainable_seen and not flag:
                raise ValueError("frozen layers must form a prefix")
            trainable_seen = trainable_seen or flag
