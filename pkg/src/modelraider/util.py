"""Shared helpers: seed derivation and environment knobs."""

from __future__ import annotations

import hashlib
import os


def derive_seed(root: int, *labels) -> int:
    """Stable 63-bit seed derived from a root seed and a label path.

    Used to give every pipeline stage and bench cell its own RNG stream
    so that concurrency and execution order never change results.
    """
    material = ":".join([str(int(root)), *[str(part) for part in labels]])
    digest = hashlib.blake2b(material.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def worker_count(cells: int) -> int:
    """Parallelism cap for bench cells, from MODELRAIDER_THREADS."""
    raw = os.environ.get("MODELRAIDER_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = 1
    return max(1, min(cap, cells)) if cells else 1
