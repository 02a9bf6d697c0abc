"""Pre-trained model identification.

A model is fingerprinted as a sequence of layer elements, each rendered
canonically as ``identifier,[d1,d2,...],dtype`` (the shape includes a
leading batch dimension of 1). Structural similarity between two models
is the normalized Levenshtein similarity over their element sequences,
with elements compared atomically: a pair matches only when identifier,
shape and dtype are all identical. Parametric similarity compares
index-aligned layers by byte-equality of their parameters and reports
the longest continuous run of matches as a fraction of the compared
pairs.

The registry stores one fingerprint JSON per pre-trained model
(``{model_id, layers, param_digests}``) next to its DSM container, from
which a trainable copy of the base can be rebuilt.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsm
from .engine import Model

MATCH_THRESHOLD = 0.8

DTYPE_NAMES = {"f32": "float32"}

APPROACH_FEATURE_EXTRACTION = "feature-extraction"
APPROACH_FINE_TUNING = "fine-tuning"
APPROACH_NONE = "none"


@dataclass(frozen=True)
class LayerElement:
    identifier: str
    shape: tuple[int, ...]
    dtype: str

    def render(self) -> str:
        dims = ",".join(str(d) for d in self.shape)
        return f"{self.identifier},[{dims}],{self.dtype}"


def to_sequence(model: Model) -> list[LayerElement]:
    """One element per layer; shapes carry a leading batch dimension of 1."""
    return [
        LayerElement(spec.identifier, (1, *spec.output_shape),
                     DTYPE_NAMES.get(spec.dtype, spec.dtype))
        for spec in model.layers
    ]


def levenshtein(a: list, b: list) -> int:
    """Unit-cost insert/delete/substitute edit distance over elements."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ea in enumerate(a, start=1):
        current = [i]
        for j, eb in enumerate(b, start=1):
            cost = 0 if ea == eb else 1
            current.append(min(previous[j] + 1,
                               current[j - 1] + 1,
                               previous[j - 1] + cost))
        previous = current
    return previous[-1]


def layer_param_digest(params: dict[str, np.ndarray]) -> str:
    """64-bit hex digest of a layer's serialized parameter bytes.

    Parameterless layers digest the empty string. Digest equality is
    used as byte-equality at this project's scale; names and dims are
    folded in so reshaped parameters never collide.
    """
    h = hashlib.blake2b(digest_size=8)
    for name, arr in params.items():
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(struct.pack("B", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def model_digests(model: Model) -> list[str]:
    return [layer_param_digest(spec.params) for spec in model.layers]


@dataclass
class FingerprintRecord:
    """Registry entry: layer sequence, per-layer digests and full parameters."""

    model_id: str
    elements: list[LayerElement]
    digests: list[str]
    model: Model | None = None

    @classmethod
    def from_model(cls, model: Model, model_id: str) -> "FingerprintRecord":
        return cls(model_id, to_sequence(model), model_digests(model), model)

    @property
    def base_layer_count(self) -> int:
        """Layers before the classifier head (trailing softmax + dense)."""
        n = len(self.elements)
        kinds = [spec.kind for spec in self.model.layers] if self.model else None
        if kinds is None:
            # Without the container, assume the conventional two-layer head.
            return max(n - 2, 0)
        if n and kinds[-1] == "softmax":
            n -= 1
        if n and kinds[n - 1] == "dense":
            n -= 1
        return n

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "layers": [
                {"id": e.identifier, "shape": list(e.shape), "dtype": e.dtype}
                for e in self.elements
            ],
            "param_digests": list(self.digests),
        }

    @classmethod
    def from_json(cls, doc: dict, model: Model | None = None) -> "FingerprintRecord":
        elements = [
            LayerElement(entry["id"], tuple(entry["shape"]), entry["dtype"])
            for entry in doc["layers"]
        ]
        return cls(doc["model_id"], elements, list(doc["param_digests"]), model)


def structural_similarity(target: Model, record: FingerprintRecord) -> float:
    """(L_total - edit distance) / L_total with L_total = max sequence length."""
    seq_t = to_sequence(target)
    seq_p = record.elements
    if not seq_t or not seq_p:
        raise ValueError("cannot compare empty layer sequences")
    total = max(len(seq_t), len(seq_p))
    sim = (total - levenshtein(seq_t, seq_p)) / total
    return min(max(sim, 0.0), 1.0)


def longest_true_run(flags: list[bool]) -> int:
    best = run = 0
    for flag in flags:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best


def true_prefix_length(flags: list[bool]) -> int:
    n = 0
    for flag in flags:
        if not flag:
            break
        n += 1
    return n


def parametric_similarity(
    finetuned: Model, record: FingerprintRecord
) -> tuple[float, list[bool]]:
    """Longest-run fraction of index-aligned layers with byte-equal parameters.

    Pairs are compared up to the shorter sequence; excess layers on
    either side contribute False. Returns (similarity, match sequence).
    """
    dig_t = model_digests(finetuned)
    dig_p = record.digests
    total = max(len(dig_t), len(dig_p))
    if total == 0:
        raise ValueError("cannot compare empty models")
    shared = min(len(dig_t), len(dig_p))
    matches = [i < shared and dig_t[i] == dig_p[i] for i in range(total)]
    return longest_true_run(matches) / total, matches


@dataclass
class Match:
    record: FingerprintRecord
    stru_sim: float


def locate_pretrained(
    target: Model,
    registry: list[FingerprintRecord],
    threshold: float = MATCH_THRESHOLD,
) -> Match | None:
    """Best structural match at or above the threshold; ties keep registry order."""
    if not registry:
        raise ValueError("registry is empty")
    best: Match | None = None
    for record in registry:
        score = structural_similarity(target, record)
        if best is None or score > best.stru_sim:
            best = Match(record, score)
    return best if best is not None and best.stru_sim >= threshold else None


@dataclass
class TransferReport:
    """Identified transfer-learning configuration of a fine-tuned model.

    ``frozen_layers`` counts the leading layers whose parameters are
    byte-identical to the matched base. ``total_layers`` counts the base
    plus one classifier block, so feature extraction is exactly
    ``frozen_layers == total_layers - 1``.
    """

    matched: str | None
    stru_sim: float
    para_sim: float | None
    matches: list[bool] = field(default_factory=list)
    approach: str = APPROACH_NONE
    frozen_layers: int = 0
    total_layers: int = 0

    def to_json(self) -> dict:
        return {
            "matched": self.matched,
            "stru_sim": self.stru_sim,
            "para_sim": self.para_sim,
            "matches": list(self.matches),
            "approach": self.approach,
            "frozen_layers": self.frozen_layers,
            "total_layers": self.total_layers,
        }


def identify_transfer(finetuned: Model, record: FingerprintRecord) -> TransferReport:
    """Infer the transfer approach and frozen-layer count against a matched base.

    The frozen count is the longest True prefix of the match sequence;
    the approach is feature extraction iff the entire base of the
    matched record lies inside that prefix.
    """
    stru = structural_similarity(finetuned, record)
    para, matches = parametric_similarity(finetuned, record)
    base_layers = record.base_layer_count
    frozen = min(true_prefix_length(matches), base_layers)
    approach = (APPROACH_FEATURE_EXTRACTION if frozen >= base_layers
                else APPROACH_FINE_TUNING)
    return TransferReport(
        matched=record.model_id,
        stru_sim=stru,
        para_sim=para,
        matches=matches,
        approach=approach,
        frozen_layers=frozen,
        total_layers=base_layers + 1,
    )


def fingerprint_and_identify(
    model: Model,
    registry: list[FingerprintRecord],
    threshold: float = MATCH_THRESHOLD,
) -> TransferReport:
    """Locate the pre-trained base and identify the transfer configuration.

    Returns a report with approach "none" when no registry entry clears
    the threshold.
    """
    match = locate_pretrained(model, registry, threshold)
    if match is None:
        best = max(structural_similarity(model, r) for r in registry)
        return TransferReport(matched=None, stru_sim=best, para_sim=None)
    return identify_transfer(model, match.record)


# --- registry storage -------------------------------------------------------

def save_registry_entry(directory, record: FingerprintRecord) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{record.model_id}.json").write_text(
        json.dumps(record.to_json(), indent=2) + "\n", encoding="utf-8")
    if record.model is not None:
        (directory / f"{record.model_id}.dsm").write_bytes(
            dsm.serialize_model(record.model))


def load_registry(directory) -> list[FingerprintRecord]:
    """Load every fingerprint in a directory, ordered by file name."""
    directory = Path(directory)
    records = []
    for path in sorted(directory.glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        container = path.with_suffix(".dsm")
        model = dsm.parse_model(container.read_bytes()) if container.exists() else None
        records.append(FingerprintRecord.from_json(doc, model))
    if not records:
        raise ValueError(f"no fingerprint records found in {directory}")
    return records


@dataclass
class FingerprintReport:
    """Similarity of one model against every registry entry."""

    model: str
    threshold: float
    scores: list[tuple[str, float]]
    matched: str | None

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "threshold": self.threshold,
            "scores": [{"model_id": mid, "stru_sim": s} for mid, s in self.scores],
            "matched": self.matched,
        }


def fingerprint_against_registry(
    model: Model,
    registry: list[FingerprintRecord],
    threshold: float = MATCH_THRESHOLD,
    model_name: str = "",
) -> FingerprintReport:
    scores = [(r.model_id, structural_similarity(model, r)) for r in registry]
    match = locate_pretrained(model, registry, threshold)
    return FingerprintReport(
        model=model_name,
        threshold=threshold,
        scores=scores,
        matched=match.record.model_id if match else None,
    )
