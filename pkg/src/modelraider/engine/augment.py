"""Image augmentation: horizontal flips and 90-degree rotations.

Both transforms permute pixels without interpolation, so the pixel
multiset and the image dimensions are preserved. Non-square images
restrict rotation to 0 or 180 degrees to keep dimensions unchanged.
"""

from __future__ import annotations

import numpy as np

from .model import F32


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {image.shape}")
    return image


def flip_horizontal(image) -> np.ndarray:
    image = _check_image(image)
    return np.ascontiguousarray(image[:, ::-1, :], dtype=F32)


def rotate90(image, quarter_turns: int) -> np.ndarray:
    image = _check_image(image)
    k = quarter_turns % 4
    if k % 2 == 1 and image.shape[0] != image.shape[1]:
        raise ValueError("90/270 degree rotation requires a square image")
    return np.ascontiguousarray(np.rot90(image, k, axes=(0, 1)), dtype=F32)


def augment(image, rng: np.random.Generator) -> np.ndarray:
    """Randomly flip (p=0.5) then rotate by a uniform multiple of 90 degrees.

    Draws exactly two values from ``rng`` so the stream position is
    independent of the outcome.
    """
    image = _check_image(image)
    do_flip = rng.random() < 0.5
    if image.shape[0] == image.shape[1]:
        k = int(rng.integers(0, 4))
    else:
        k = 2 * int(rng.integers(0, 2))
    out = image[:, ::-1, :] if do_flip else image
    return np.ascontiguousarray(np.rot90(out, k, axes=(0, 1)), dtype=F32)
