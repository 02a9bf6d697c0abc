"""Model extraction from app packages.

Scans a package for entries matching the configured model-file naming
schemes, parses each candidate, and keeps only models that pass an
operability check (inference on seeded random data must produce finite,
normalized outputs). Labels from ``assets/labels.txt`` are attached to a
model only when the line count matches its class count; otherwise the
model is extracted with labels marked absent, which downstream stages
treat as blocking for targeted attacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsm
from .apppkg import DEFAULT_SUFFIXES, open_package, read_package_labels
from .engine import F32, Model, ShapeMismatchError, forward

OPERABILITY_BATCH = 4
NORMALIZATION_TOL = 1e-5

# Machine-readable rejection reason codes.
REASON_BAD_MAGIC = "bad-magic"
REASON_UNSUPPORTED_VERSION = "unsupported-version"
REASON_TRUNCATED = "truncated"
REASON_BAD_LAYER_KIND = "bad-layer-kind"
REASON_INVALID_MODEL = "invalid-model"
REASON_SHAPE_MISMATCH = "shape-mismatch"
REASON_NON_FINITE = "non-finite-output"
REASON_NOT_NORMALIZED = "not-normalized"


@dataclass
class CandidateEntry:
    path: str
    size: int


@dataclass
class OperabilityReport:
    passed: bool
    reason: str | None = None
    detail: str | None = None


@dataclass
class ExtractedModel:
    name: str
    path: str
    model: Model
    container: bytes
    labels: list[str] | None = None

    @property
    def labels_present(self) -> bool:
        return self.labels is not None


@dataclass
class RejectedEntry:
    path: str
    reason: str
    detail: str


@dataclass
class ScanReport:
    package: str
    suffixes: tuple[str, ...]
    candidates: list[CandidateEntry] = field(default_factory=list)
    extracted: list[ExtractedModel] = field(default_factory=list)
    rejected: list[RejectedEntry] = field(default_factory=list)

    def get(self, name: str) -> ExtractedModel:
        for item in self.extracted:
            if item.name == name:
                return item
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "package": self.package,
            "suffixes": list(self.suffixes),
            "candidates": [{"path": c.path, "size": c.size} for c in self.candidates],
            "extracted": [
                {
                    "name": e.name,
                    "path": e.path,
                    "layers": len(e.model.layers),
                    "input_shape": list(e.model.input_shape),
                    "num_classes": e.model.num_classes,
                    "labels_present": e.labels_present,
                    "labels": e.labels,
                }
                for e in self.extracted
            ],
            "rejected": [
                {"path": r.path, "reason": r.reason, "detail": r.detail}
                for r in self.rejected
            ],
        }


def scan_package(zip_bytes: bytes, suffixes=DEFAULT_SUFFIXES) -> list[CandidateEntry]:
    """Entries whose path ends with any configured suffix, in archive order."""
    suffixes = tuple(suffixes)
    with open_package(zip_bytes) as zf:
        return [
            CandidateEntry(info.filename, info.file_size)
            for info in zf.infolist()
            if any(info.filename.endswith(sfx) for sfx in suffixes)
        ]


def operability_check(model: Model, seed: int = 0) -> OperabilityReport:
    """Run inference on a seeded random batch; pass iff outputs are sane.

    Sane means finite values with every probability row summing to
    1 within 1e-5. Failures come back as report entries, not errors.
    """
    rng = np.random.default_rng(seed)
    batch = rng.standard_normal((OPERABILITY_BATCH, *model.input_shape)).astype(F32)
    try:
        probs = forward(model, batch)
    except ShapeMismatchError as exc:
        return OperabilityReport(False, REASON_SHAPE_MISMATCH, str(exc))
    if not np.isfinite(probs).all():
        return OperabilityReport(False, REASON_NON_FINITE,
                                 "inference produced NaN or Inf")
    sums = probs.astype(np.float64).sum(axis=1)
    if np.abs(sums - 1.0).max() > NORMALIZATION_TOL:
        return OperabilityReport(False, REASON_NOT_NORMALIZED,
                                 f"probability rows sum to {sums.tolist()}")
    return OperabilityReport(True)


def _parse_reason(exc: dsm.DsmError) -> str:
    if isinstance(exc, dsm.BadMagic):
        return REASON_BAD_MAGIC
    if isinstance(exc, dsm.UnsupportedVersion):
        return REASON_UNSUPPORTED_VERSION
    if isinstance(exc, dsm.Truncated):
        return REASON_TRUNCATED
    if isinstance(exc, dsm.BadLayerKind):
        return REASON_BAD_LAYER_KIND
    return REASON_INVALID_MODEL


def _entry_model_name(path: str, suffixes) -> str:
    base = path.rsplit("/", 1)[-1]
    for sfx in suffixes:
        if base.endswith(sfx):
            return base[: len(base) - len(sfx)]
    return base


def extract_models(
    zip_bytes: bytes,
    suffixes=DEFAULT_SUFFIXES,
    package_name: str = "",
    seed: int = 0,
) -> ScanReport:
    """Scan, parse and operability-check every candidate model in a package."""
    suffixes = tuple(suffixes)
    report = ScanReport(package=package_name, suffixes=suffixes)
    report.candidates = scan_package(zip_bytes, suffixes)
    labels: list[str] | None
    with open_package(zip_bytes) as zf:
        labels = read_package_labels(zf)
        blobs = {c.path: zf.read(c.path) for c in report.candidates}
    for candidate in report.candidates:
        blob = blobs[candidate.path]
        try:
            model = dsm.parse_model(blob)
        except dsm.DsmError as exc:
            report.rejected.append(
                RejectedEntry(candidate.path, _parse_reason(exc), str(exc)))
            continue
        check = operability_check(model, seed=seed)
        if not check.passed:
            report.rejected.append(
                RejectedEntry(candidate.path, check.reason, check.detail or ""))
            continue
        attached = labels if labels is not None and len(labels) == model.num_classes else None
        report.extracted.append(
            ExtractedModel(
                name=_entry_model_name(candidate.path, suffixes),
                path=candidate.path,
                model=model,
                container=blob,
                labels=attached,
            ))
    return report
