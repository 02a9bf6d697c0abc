"""Forward inference, loss, and backpropagation.

All arithmetic runs in float64; public entry points round results to
float32 so stored tensors stay 32-bit. Convolutions use "same" padding
and derive their stride from the declared output shape (output H must
equal ceil(input H / stride)), so strides never need to be stored.
"""

from __future__ import annotations

import numpy as np

from .model import F32, Model, LayerSpec, PARAMETRIC_KINDS, ShapeMismatchError

LOSS_CLAMP = 1e-12


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _require(cond: bool, layer: str, detail: str) -> None:
    if not cond:
        raise ShapeMismatchError(layer, detail)


def _param(spec: LayerSpec, name: str) -> np.ndarray:
    try:
        return spec.params[name]
    except KeyError:
        raise ShapeMismatchError(spec.identifier, f"missing parameter {name!r}") from None


def _conv_geometry(spec: LayerSpec, in_shape, kh: int, kw: int):
    """Derive (stride, padding) for same-padded convolution."""
    _require(len(in_shape) == 3, spec.identifier,
             f"conv input must be rank 3 (H,W,C), got {in_shape}")
    _require(len(spec.output_shape) == 3, spec.identifier,
             f"conv output must be rank 3, got {spec.output_shape}")
    h, w = in_shape[0], in_shape[1]
    oh, ow = spec.output_shape[0], spec.output_shape[1]
    sh = -(-h // oh)  # ceil
    sw = -(-w // ow)
    _require(sh == sw, spec.identifier, f"anisotropic stride {sh}x{sw} unsupported")
    _require(-(-h // sh) == oh and -(-w // sw) == ow, spec.identifier,
             f"output {oh}x{ow} not reachable from {h}x{w} with same padding")
    s = sh
    pad_h = max((oh - 1) * s + kh - h, 0)
    pad_w = max((ow - 1) * s + kw - w, 0)
    return s, (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)


def _pad_input(x: np.ndarray, pads) -> np.ndarray:
    top, bottom, left, right = pads
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))


def _conv2d_forward(spec: LayerSpec, x: np.ndarray):
    w = _f64(_param(spec, "weights"))
    b = _f64(_param(spec, "bias"))
    _require(w.ndim == 4, spec.identifier, f"conv weights must be rank 4, got {w.ndim}")
    kh, kw, ci, co = w.shape
    _require(x.shape[3] == ci, spec.identifier,
             f"weights expect {ci} input channels, got {x.shape[3]}")
    _require(spec.output_shape[2] == co, spec.identifier,
             f"weights produce {co} channels, declared {spec.output_shape[2]}")
    _require(b.shape == (co,), spec.identifier, f"bias must be [{co}], got {b.shape}")
    s, pads = _conv_geometry(spec, x.shape[1:], kh, kw)
    xp = _pad_input(x, pads)
    oh, ow = spec.output_shape[0], spec.output_shape[1]
    out = np.zeros((x.shape[0], oh, ow, co))
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u:u + s * oh:s, v:v + s * ow:s, :]
            out += xs @ w[u, v]
    out += b
    cache = (xp, s, pads, w.shape)
    return out, cache


def _conv2d_backward(spec: LayerSpec, cache, g: np.ndarray, want_params: bool):
    xp, s, pads, wshape = cache
    kh, kw, ci, co = wshape
    w = _f64(spec.params["weights"])
    oh, ow = g.shape[1], g.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros(wshape) if want_params else None
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u:u + s * oh:s, v:v + s * ow:s, :]
            if want_params:
                dw[u, v] = np.tensordot(xs, g, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, u:u + s * oh:s, v:v + s * ow:s, :] += g @ w[u, v].T
    top, bottom, left, right = pads
    h = dxp.shape[1] - top - bottom
    wdt = dxp.shape[2] - left - right
    dx = dxp[:, top:top + h, left:left + wdt, :]
    grads = {"weights": dw, "bias": g.sum(axis=(0, 1, 2))} if want_params else None
    return dx, grads


def _depthwise_forward(spec: LayerSpec, x: np.ndarray):
    w = _f64(_param(spec, "weights"))
    b = _f64(_param(spec, "bias"))
    _require(w.ndim == 3, spec.identifier,
             f"depthwise weights must be rank 3 [kh,kw,c], got rank {w.ndim}")
    kh, kw, c = w.shape
    _require(x.shape[3] == c, spec.identifier,
             f"weights expect {c} channels, got {x.shape[3]}")
    _require(spec.output_shape[2] == c, spec.identifier,
             "depthwise conv preserves channel count")
    _require(b.shape == (c,), spec.identifier, f"bias must be [{c}], got {b.shape}")
    s, pads = _conv_geometry(spec, x.shape[1:], kh, kw)
    xp = _pad_input(x, pads)
    oh, ow = spec.output_shape[0], spec.output_shape[1]
    out = np.zeros((x.shape[0], oh, ow, c))
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u:u + s * oh:s, v:v + s * ow:s, :]
            out += xs * w[u, v]
    out += b
    cache = (xp, s, pads, w.shape)
    return out, cache


def _depthwise_backward(spec: LayerSpec, cache, g: np.ndarray, want_params: bool):
    xp, s, pads, wshape = cache
    kh, kw, c = wshape
    w = _f64(spec.params["weights"])
    oh, ow = g.shape[1], g.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros(wshape) if want_params else None
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u:u + s * oh:s, v:v + s * ow:s, :]
            if want_params:
                dw[u, v] = (xs * g).sum(axis=(0, 1, 2))
            dxp[:, u:u + s * oh:s, v:v + s * ow:s, :] += g * w[u, v]
    top, bottom, left, right = pads
    h = dxp.shape[1] - top - bottom
    wdt = dxp.shape[2] - left - right
    dx = dxp[:, top:top + h, left:left + wdt, :]
    grads = {"weights": dw, "bias": g.sum(axis=(0, 1, 2))} if want_params else None
    return dx, grads


def _dense_forward(spec: LayerSpec, x: np.ndarray):
    w = _f64(_param(spec, "weights"))
    b = _f64(_param(spec, "bias"))
    _require(x.ndim == 2, spec.identifier,
             f"dense input must be rank 1 per sample, got shape {x.shape[1:]}")
    _require(w.ndim == 2 and w.shape[0] == x.shape[1], spec.identifier,
             f"weights [{w.shape}] incompatible with input width {x.shape[1]}")
    _require(b.shape == (w.shape[1],), spec.identifier, "bias width mismatch")
    return x @ w + b, x


def _dense_backward(spec: LayerSpec, cache, g: np.ndarray, want_params: bool):
    x = cache
    w = _f64(spec.params["weights"])
    dx = g @ w.T
    grads = {"weights": x.T @ g, "bias": g.sum(axis=0)} if want_params else None
    return dx, grads


def _apply_layer(spec: LayerSpec, x: np.ndarray):
    """Returns (output, backward_cache). Shapes validated against the spec."""
    if spec.kind == "conv2d":
        out, cache = _conv2d_forward(spec, x)
    elif spec.kind == "depthwise-conv2d":
        out, cache = _depthwise_forward(spec, x)
    elif spec.kind == "dense":
        out, cache = _dense_forward(spec, x)
    elif spec.kind == "relu6":
        out, cache = np.clip(x, 0.0, 6.0), x
    elif spec.kind == "softmax":
        _require(x.ndim == 2, spec.identifier, "softmax input must be rank 1 per sample")
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out, cache = e / e.sum(axis=1, keepdims=True), None
    elif spec.kind == "global-avg-pool":
        _require(x.ndim == 4, spec.identifier, "pooling input must be rank 3 per sample")
        out, cache = x.mean(axis=(1, 2)), x.shape
    elif spec.kind == "flatten":
        out, cache = x.reshape(x.shape[0], -1), x.shape
    else:
        raise ShapeMismatchError(spec.identifier, f"unknown layer kind {spec.kind!r}")
    _require(out.shape[1:] == spec.output_shape, spec.identifier,
             f"computed output {out.shape[1:]}, declared {spec.output_shape}")
    return out, cache


def _backward_layer(spec: LayerSpec, cache, g: np.ndarray, want_params: bool):
    if spec.kind == "conv2d":
        return _conv2d_backward(spec, cache, g, want_params)
    if spec.kind == "depthwise-conv2d":
        return _depthwise_backward(spec, cache, g, want_params)
    if spec.kind == "dense":
        return _dense_backward(spec, cache, g, want_params)
    if spec.kind == "relu6":
        x = cache
        return g * ((x > 0.0) & (x < 6.0)), None
    if spec.kind == "global-avg-pool":
        b, h, w, c = cache
        return np.broadcast_to(g[:, None, None, :] / (h * w), (b, h, w, c)).copy(), None
    if spec.kind == "flatten":
        return g.reshape(cache), None
    raise ShapeMismatchError(spec.identifier, f"no backward for kind {spec.kind!r}")


def _run_forward(model: Model, batch, keep_caches: bool):
    """Run every layer; returns (activations, caches). Float64 throughout."""
    if not model.layers:
        raise ShapeMismatchError("input", "model has no layers")
    if model.layers[-1].kind != "softmax":
        raise ShapeMismatchError(model.layers[-1].identifier,
                                 "last layer must be softmax")
    x = _f64(batch)
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatchError(
            "input", f"expected {model.input_shape}, got {x.shape[1:]}")
    acts = [x]
    caches = []
    for spec in model.layers:
        x, cache = _apply_layer(spec, x)
        acts.append(x)
        caches.append(cache if keep_caches else None)
    return acts, caches


def forward(model: Model, batch) -> np.ndarray:
    """Class probabilities for a batch; output shape [B, num_classes]."""
    acts, _ = _run_forward(model, batch, keep_caches=False)
    return acts[-1].astype(F32)


def forward_logits(model: Model, batch) -> np.ndarray:
    """Pre-softmax activations, [B, num_classes]."""
    acts, _ = _run_forward(model, batch, keep_caches=False)
    return acts[-2].astype(F32)


def predict(model: Model, x) -> tuple[int, np.ndarray]:
    """Predicted class and probability vector for a single input.

    Ties resolve to the lowest class index.
    """
    probs = forward(model, np.asarray(x)[None, ...])[0]
    return int(np.argmax(probs)), probs


def predict_batch(model: Model, batch) -> np.ndarray:
    return np.argmax(forward(model, batch), axis=1)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def loss_sce(probs, labels) -> float:
    """Sparse categorical cross entropy: mean of -log p[label].

    Probabilities are clamped at 1e-12 before the log.
    """
    probs = _f64(probs)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, LOSS_CLAMP)).mean())


def _sce_grad_at_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # Combined softmax + cross-entropy gradient; mean over the batch.
    g = probs.copy()
    g[np.arange(probs.shape[0]), labels] -= 1.0
    return g / probs.shape[0]


def _backprop(model: Model, acts, caches, dlogits, trainable: set[int] | None):
    """Propagate a gradient seeded at the softmax input back to the model input.

    Returns (d_input, {layer_index: {param_name: grad}}).
    """
    g = _f64(dlogits)
    param_grads: dict[int, dict[str, np.ndarray]] = {}
    for li in range(len(model.layers) - 2, -1, -1):
        spec = model.layers[li]
        want = bool(trainable and li in trainable)
        g, grads = _backward_layer(spec, caches[li], g, want)
        if grads is not None:
            param_grads[li] = grads
    return g, param_grads


def _trainable_param_layers(model: Model) -> set[int]:
    return {
        i for i, spec in enumerate(model.layers)
        if model.trainable_mask[i] and spec.kind in PARAMETRIC_KINDS
    }


def _param_gradients_f64(model: Model, batch, labels):
    """Internal: float64 gradients plus the batch loss, for the train loop."""
    labels = _check_labels(labels, model.num_classes)
    acts, caches = _run_forward(model, batch, keep_caches=True)
    probs = acts[-1]
    picked = probs[np.arange(probs.shape[0]), labels]
    loss = float(-np.log(np.maximum(picked, LOSS_CLAMP)).mean())
    dlogits = _sce_grad_at_logits(probs, labels)
    _, grads = _backprop(model, acts, caches, dlogits, _trainable_param_layers(model))
    return grads, loss


def param_gradients(model: Model, batch, labels) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of loss_sce(forward(...)) for every trainable layer's parameters.

    Returns {layer_identifier: {param_name: float32 array}}; frozen layers
    are omitted.
    """
    grads, _ = _param_gradients_f64(model, batch, labels)
    return {
        model.layers[li].identifier: {k: v.astype(F32) for k, v in g.items()}
        for li, g in grads.items()
    }


def input_gradient(model: Model, x, label) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to a single input."""
    labels = _check_labels([label], model.num_classes)
    acts, caches = _run_forward(model, np.asarray(x)[None, ...], keep_caches=True)
    dlogits = _sce_grad_at_logits(acts[-1], labels)
    dx, _ = _backprop(model, acts, caches, dlogits, None)
    return dx[0].astype(F32)


def input_gradient_from_logits(model: Model, x, dlogits) -> tuple[np.ndarray, np.ndarray]:
    """Seed a custom gradient at the logits of a single input.

    Building block for attack objectives that are not plain cross
    entropy. Returns (logits, d_input) for the single sample.
    """
    acts, caches = _run_forward(model, np.asarray(x)[None, ...], keep_caches=True)
    dx, _ = _backprop(model, acts, caches, _f64(dlogits)[None, :], None)
    return acts[-2][0].astype(F32), dx[0].astype(F32)


def evaluate(model: Model, images, labels) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset, computed in float64."""
    labels = _check_labels(labels, model.num_classes)
    acts, _ = _run_forward(model, images, keep_caches=False)
    probs = acts[-1]
    picked = probs[np.arange(probs.shape[0]), labels]
    loss = float(-np.log(np.maximum(picked, LOSS_CLAMP)).mean())
    accuracy = float((np.argmax(probs, axis=1) == labels).mean())
    return loss, accuracy
