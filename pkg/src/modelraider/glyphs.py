"""Procedural glyph dataset for deterministic experiments.

Each class is a parametric shape rendered onto a noisy single-channel
canvas with per-sample jitter in position, extent and intensity. The
roster deliberately includes one visually similar pair, "ring" and
"ring_gap", so victims trained on tasks containing both exhibit a
usable most-error-prone class.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import F32, LabeledDataset

SHAPES = (
    "disk",
    "ring",
    "ring_gap",
    "cross",
    "saltire",
    "hbar",
    "vbar",
    "box",
    "slab",
    "stripes",
    "checker",
    "dots",
)


def _canvas(rng: np.random.Generator, hw: tuple[int, int]):
    h, w = hw
    cy = h / 2.0 + rng.uniform(-2.0, 2.0)
    cx = w / 2.0 + rng.uniform(-2.0, 2.0)
    yy, xx = np.mgrid[0:h, 0:w]
    return yy - cy, xx - cx


def _mask(shape: str, rng: np.random.Generator, hw: tuple[int, int]) -> np.ndarray:
    dy, dx = _canvas(rng, hw)
    radius = np.hypot(dy, dx)
    if shape == "disk":
        return radius <= rng.uniform(6.0, 8.0)
    if shape in ("ring", "ring_gap"):
        outer = rng.uniform(7.0, 9.0)
        inner = outer - rng.uniform(2.0, 3.0)
        ring = (radius >= inner) & (radius <= outer)
        if shape == "ring":
            return ring
        start = rng.uniform(0.0, 2.0 * math.pi)
        width = rng.uniform(0.7, 1.1)  # radians, a modest bite out of the ring
        angle = np.mod(np.arctan2(dy, dx) - start, 2.0 * math.pi)
        return ring & ~(angle <= width)
    if shape == "cross":
        t = rng.uniform(1.5, 2.5)
        arm = rng.uniform(7.0, 9.5)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= arm)) | \
               ((np.abs(dy) <= t) & (np.abs(dx) <= arm))
    if shape == "saltire":
        u, v = dy + dx, dy - dx
        t = rng.uniform(2.0, 3.5)
        arm = rng.uniform(10.0, 13.0)
        return ((np.abs(u) <= t) & (np.abs(v) <= arm)) | \
               ((np.abs(v) <= t) & (np.abs(u) <= arm))
    if shape == "hbar":
        return (np.abs(dy) <= rng.uniform(2.0, 3.5)) & \
               (np.abs(dx) <= rng.uniform(8.0, 10.0))
    if shape == "vbar":
        return (np.abs(dx) <= rng.uniform(2.0, 3.5)) & \
               (np.abs(dy) <= rng.uniform(8.0, 10.0))
    if shape == "box":
        outer = rng.uniform(6.5, 8.5)
        thickness = rng.uniform(1.5, 2.5)
        side = np.maximum(np.abs(dy), np.abs(dx))
        return (side <= outer) & (side >= outer - thickness)
    if shape == "slab":
        return np.maximum(np.abs(dy), np.abs(dx)) <= rng.uniform(5.0, 7.0)
    if shape == "stripes":
        period = rng.uniform(5.0, 7.0)
        phase = rng.uniform(0.0, period)
        return np.mod(dy + dx + phase, period) < period / 2.0
    if shape == "checker":
        cell = rng.uniform(3.0, 5.0)
        parity = rng.integers(0, 2)
        return (np.floor(dy / cell) + np.floor(dx / cell) + parity) % 2 == 0
    if shape == "dots":
        period = rng.uniform(5.0, 7.0)
        r = rng.uniform(1.3, 2.0)
        gy = np.mod(dy, period) - period / 2.0
        gx = np.mod(dx, period) - period / 2.0
        return np.hypot(gy, gx) <= r
    raise ValueError(f"unknown glyph shape {shape!r}")


def render_glyph(shape: str, rng: np.random.Generator,
                 hw: tuple[int, int] = (24, 24)) -> np.ndarray:
    """One H x W x 1 float32 image in [0, 1]."""
    mask = _mask(shape, rng, hw)
    background = rng.uniform(0.0, 0.12, size=hw)
    foreground = rng.uniform(0.75, 1.0) - rng.uniform(0.0, 0.1, size=hw)
    image = np.where(mask, foreground, background)
    return np.clip(image, 0.0, 1.0).astype(F32)[..., None]


def make_pool(class_names: list[str], per_class: int, rng: np.random.Generator,
              hw: tuple[int, int] = (24, 24)) -> LabeledDataset:
    """Class-major pool: ``per_class`` samples of each class, in roster order."""
    images = []
    labels = []
    for label, name in enumerate(class_names):
        for _ in range(per_class):
            images.append(render_glyph(name, rng, hw))
            labels.append(label)
    return LabeledDataset(np.stack(images), np.asarray(labels, dtype=np.int64))
