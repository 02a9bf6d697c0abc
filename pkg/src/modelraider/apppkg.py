"""App-package assembly: ZIP archives that carry model files.

Packages mirror the layout of mobile app archives: model containers
live under ``assets/`` with a configurable suffix and an optional
``assets/labels.txt`` (one class name per line, UTF-8, LF endings, no
trailing newline). Archives are built deterministically: fixed
timestamps, stored (uncompressed) entries, model entries first in the
given order, then the label file, then any extra files sorted by path.
"""

from __future__ import annotations

import io
import zipfile

from .dsm import serialize_model
from .engine import Model

ASSETS_DIR = "assets"
LABELS_PATH = "assets/labels.txt"
DEFAULT_SUFFIXES = (".tflite", ".lite")

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class PackageError(Exception):
    """Raised for malformed app packages."""


def encode_labels(labels: list[str]) -> bytes:
    return "\n".join(labels).encode("utf-8")


def decode_labels(raw: bytes) -> list[str]:
    text = raw.decode("utf-8")
    if not text:
        return []
    return text.split("\n")


def _add_entry(zf: zipfile.ZipFile, path: str, data: bytes) -> None:
    info = zipfile.ZipInfo(path, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def build_app_package(
    models: list[tuple[str, Model]],
    labels: list[str],
    suffix: str = ".tflite",
    extras: dict[str, bytes] | None = None,
) -> bytes:
    """Build a ZIP package holding each model at ``assets/<name><suffix>``.

    Model names must be unique. ``extras`` adds arbitrary decoy files
    keyed by archive path.
    """
    names = [name for name, _ in models]
    if len(set(names)) != len(names):
        raise ValueError("duplicate model names in package")
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, model in models:
            _add_entry(zf, f"{ASSETS_DIR}/{name}{suffix}", serialize_model(model))
        _add_entry(zf, LABELS_PATH, encode_labels(labels))
        for path in sorted(extras or {}):
            _add_entry(zf, path, extras[path])
    return buf.getvalue()


def open_package(zip_bytes: bytes) -> zipfile.ZipFile:
    try:
        zf = zipfile.ZipFile(io.BytesIO(zip_bytes))
        zf.infolist()
        return zf
    except zipfile.BadZipFile as exc:
        raise PackageError(f"corrupt ZIP archive: {exc}") from None


def read_package_labels(zf: zipfile.ZipFile) -> list[str] | None:
    """The label list from assets/labels.txt, or None when absent."""
    try:
        raw = zf.read(LABELS_PATH)
    except KeyError:
        return None
    return decode_labels(raw)
