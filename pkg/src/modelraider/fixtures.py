"""Fixture synthesis: pre-trained bases, fine-tuned victims, packages, pools.

Stands in for a public model repository plus an app-store corpus. A
scenario pins every knob; all artifacts derive deterministically from
its seed, so rebuilding a scenario reproduces every byte.

The transfer grid is given in the reference scale of a 154-layer base
and rescaled to this project's much shallower bases. Scaled counts are
snapped to the nearest valid boundary: the first unfrozen layer must
carry parameters, otherwise training could not change it and the frozen
prefix would be ambiguous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .apppkg import build_app_package
from .attack import AttackPools
from .engine import (
    F32,
    LabeledDataset,
    Model,
    TrainConfig,
    conv2d,
    dense,
    depthwise_conv2d,
    evaluate,
    flatten,
    global_avg_pool,
    relu6,
    softmax,
    train,
)
from .fingerprint import (
    APPROACH_FEATURE_EXTRACTION,
    APPROACH_FINE_TUNING,
    FingerprintRecord,
    save_registry_entry,
)
from .glyphs import SHAPES, make_pool
from .engine.model import PARAMETRIC_KINDS
from .util import derive_seed


class FixtureError(Exception):
    pass


@dataclass
class TaskSpec:
    name: str
    classes: tuple[str, ...]
    target: str

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.target not in self.classes:
            raise ValueError(f"target {self.target!r} not in task classes")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown glyph classes: {sorted(unknown)}")


@dataclass
class AttackSpec:
    algorithm: str
    epsilon: float


@dataclass
class Scenario:
    """Everything that defines one experiment, serializable to JSON."""

    seed: int = 1234
    image_hw: tuple[int, int] = (24, 24)
    pretrain_classes: tuple[str, ...] = ("disk", "cross", "hbar", "box",
                                         "stripes", "dots")
    tasks: tuple[TaskSpec, ...] = (
        TaskSpec("glyphs-a", ("ring", "ring_gap", "saltire", "vbar", "slab"),
                 "ring"),
    )
    pretrain_per_class: int = 70
    victim_per_class: int = 60
    attack_per_class: int = 60
    source_per_class: int = 80
    paper_grid: tuple[int, ...] = (0, 10, 20, 30, 40, 60)
    paper_base_layers: int = 154
    base_epochs: int = 40
    victim_epochs: int = 40
    accuracy_floor: float = 0.85
    settings: tuple[str, ...] = ("pma", "bama", "e-bama")
    attacks: tuple[AttackSpec, ...] = (
        AttackSpec("fgsm", 0.03),
        AttackSpec("cw", 1.0),
        AttackSpec("can", 1.5),
    )
    source_count: int = 50
    surrogate_budget: int = 200

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        self.pretrain_classes = tuple(self.pretrain_classes)
        self.tasks = tuple(t if isinstance(t, TaskSpec) else TaskSpec(**t)
                           for t in self.tasks)
        self.paper_grid = tuple(self.paper_grid)
        self.settings = tuple(self.settings)
        self.attacks = tuple(a if isinstance(a, AttackSpec) else AttackSpec(**a)
                             for a in self.attacks)
        for task in self.tasks:
            overlap = set(task.classes) & set(self.pretrain_classes)
            if overlap:
                raise ValueError(
                    f"task {task.name!r} shares classes with the pre-training "
                    f"set: {sorted(overlap)}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "Scenario":
        return cls(**doc)


def default_scenario(seed: int = 1234) -> Scenario:
    return Scenario(seed=seed)


# --- architectures ----------------------------------------------------------

def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(F32)


def build_base_model(rng: np.random.Generator, hw: tuple[int, int],
                     num_classes: int, prefix: str = "glyphnet") -> Model:
    """Depthwise-separable stack: stem conv, four dw/pw blocks, pooled head."""
    h, w = hw
    channels = 1
    layers = []

    def ceil_div(a, s):
        return -(-a // s)

    stem_c = 8
    h2, w2 = ceil_div(h, 2), ceil_div(w, 2)
    layers.append(conv2d(f"{prefix}/stem/conv2d",
                         _he(rng, (3, 3, channels, stem_c), 9 * channels),
                         np.zeros(stem_c, F32), (h2, w2, stem_c)))
    layers.append(relu6(f"{prefix}/stem/relu6", (h2, w2, stem_c)))
    h, w, channels = h2, w2, stem_c

    for i, (out_c, stride) in enumerate(zip((16, 24, 32, 32), (1, 2, 1, 1))):
        h2, w2 = ceil_div(h, stride), ceil_div(w, stride)
        layers.append(depthwise_conv2d(
            f"{prefix}/block{i}/depthwise",
            _he(rng, (3, 3, channels), 9), np.zeros(channels, F32),
            (h2, w2, channels)))
        layers.append(relu6(f"{prefix}/block{i}/dw_relu6", (h2, w2, channels)))
        layers.append(conv2d(
            f"{prefix}/block{i}/pointwise",
            _he(rng, (1, 1, channels, out_c), channels), np.zeros(out_c, F32),
            (h2, w2, out_c)))
        layers.append(relu6(f"{prefix}/block{i}/pw_relu6", (h2, w2, out_c)))
        h, w, channels = h2, w2, out_c

    layers.append(global_avg_pool(f"{prefix}/pool", channels))
    layers.append(dense(f"{prefix}/head/dense",
                        _he(rng, (channels, num_classes), channels),
                        np.zeros(num_classes, F32)))
    layers.append(softmax(f"{prefix}/head/softmax", num_classes))
    return Model(layers, (hw[0], hw[1], 1), num_classes,
                 [True] * len(layers))


def build_alt_model(rng: np.random.Generator, hw: tuple[int, int],
                    num_classes: int, prefix: str = "altnet") -> Model:
    """Plain conv stack with flatten; structurally unlike the main base."""
    h, w = hw
    h2, w2 = -(-h // 2), -(-w // 2)
    h4, w4 = -(-h2 // 2), -(-w2 // 2)
    layers = [
        conv2d(f"{prefix}/conv0", _he(rng, (3, 3, 1, 6), 9),
               np.zeros(6, F32), (h2, w2, 6)),
        relu6(f"{prefix}/relu0", (h2, w2, 6)),
        conv2d(f"{prefix}/conv1", _he(rng, (3, 3, 6, 12), 54),
               np.zeros(12, F32), (h4, w4, 12)),
        relu6(f"{prefix}/relu1", (h4, w4, 12)),
        flatten(f"{prefix}/flatten", h4 * w4 * 12),
        dense(f"{prefix}/dense", _he(rng, (h4 * w4 * 12, num_classes),
                                     h4 * w4 * 12), np.zeros(num_classes, F32)),
        softmax(f"{prefix}/softmax", num_classes),
    ]
    return Model(layers, (hw[0], hw[1], 1), num_classes, [True] * len(layers))


def make_victim(base: Model, task_classes: tuple[str, ...], unfrozen: int,
                rng: np.random.Generator, head_prefix: str) -> Model:
    """Copy the base (headless), freeze all but the last ``unfrozen`` layers,
    and attach a fresh classifier head for the task."""
    base_layers = [spec.copy() for spec in base.layers[:-2]]
    base_count = len(base_layers)
    if not 0 <= unfrozen <= base_count:
        raise ValueError("unfrozen count outside the base depth")
    feature_width = int(np.prod(base_layers[-1].output_shape))
    num_classes = len(task_classes)
    head = [
        dense(f"{head_prefix}/dense",
              _he(rng, (feature_width, num_classes), feature_width),
              np.zeros(num_classes, F32)),
        softmax(f"{head_prefix}/softmax", num_classes),
    ]
    mask = [i >= base_count - unfrozen for i in range(base_count)] + [True, True]
    return Model(base_layers + head, base.input_shape, num_classes, mask)


# --- transfer grid scaling --------------------------------------------------

def valid_unfrozen_counts(base: Model) -> list[int]:
    """Unfrozen counts whose boundary layer carries parameters (plus zero)."""
    base_count = len(base.layers) - 2
    valid = [0]
    for k in range(1, base_count + 1):
        if base.layers[base_count - k].kind in PARAMETRIC_KINDS:
            valid.append(k)
    return valid


def scale_grid(paper_grid, paper_base_layers: int, base: Model) -> list[tuple[int, int]]:
    """Map reference-scale unfrozen counts onto this base's valid counts.

    Returns (paper_label, actual_unfrozen) pairs; actual counts are
    distinct and monotone in the paper labels.
    """
    base_count = len(base.layers) - 2
    valid = valid_unfrozen_counts(base)
    taken: set[int] = set()
    mapping = []
    for label in paper_grid:
        scaled = round(label * base_count / paper_base_layers)
        candidates = [k for k in valid if k >= scaled and k not in taken]
        if not candidates:
            raise FixtureError(
                f"cannot place grid point {label}: base depth {base_count} exhausted")
        actual = min(candidates)
        taken.add(actual)
        mapping.append((int(label), actual))
    return mapping


# --- fixture building -------------------------------------------------------

@dataclass
class VictimFixture:
    task: str
    paper_label: int
    unfrozen: int
    expected_frozen: int
    expected_approach: str
    accuracy: float
    package_path: Path
    model_name: str = "model"


@dataclass
class FixtureSet:
    root: Path
    scenario: Scenario
    registry_dir: Path
    registry: list[FingerprintRecord]
    base_record_id: str
    victims: list[VictimFixture]
    pools: dict[str, AttackPools]
    metadata: dict = field(default_factory=dict)


def _split_train_val(pool: LabeledDataset, rng: np.random.Generator,
                     fraction: float = 0.8):
    order = rng.permutation(len(pool))
    cut = int(fraction * len(order))
    return pool.subset(order[:cut]), pool.subset(order[cut:])


def _train_classifier(model: Model, pool: LabeledDataset, epochs: int,
                      seed: int, rng: np.random.Generator,
                      floor: float, what: str):
    train_set, val_set = _split_train_val(pool, rng)
    cfg = TrainConfig(epochs=epochs, batch_size=32, seed=seed)
    trained, _ = train(model, train_set, cfg)
    _, accuracy = evaluate(trained, val_set.images, val_set.labels)
    if accuracy < floor:
        raise FixtureError(
            f"{what} reached accuracy {accuracy:.3f}, below the floor {floor}")
    return trained, accuracy


def _decoy_files(rng: np.random.Generator) -> dict[str, bytes]:
    return {
        "AndroidManifest.xml": b"<manifest package='com.example.glyphs'/>",
        "classes.dex": rng.bytes(256),
        "res/drawable/icon.png": rng.bytes(128),
        "lib/arm64/libnative.so": rng.bytes(64),
    }


def make_fixtures(scenario: Scenario, out_dir) -> FixtureSet:
    """Build registry, victim app packages and image pools for a scenario."""
    root = Path(out_dir)
    registry_dir = root / "registry"
    apps_dir = root / "apps"
    pools_dir = root / "pools"
    for d in (registry_dir, apps_dir, pools_dir):
        d.mkdir(parents=True, exist_ok=True)
    (root / "scenario.json").write_text(
        json.dumps(scenario.to_json(), indent=2) + "\n", encoding="utf-8")

    hw = scenario.image_hw
    seed = scenario.seed

    # Pre-trained base on the generic classes.
    pretrain_pool = make_pool(list(scenario.pretrain_classes),
                              scenario.pretrain_per_class,
                              np.random.default_rng(derive_seed(seed, "pretrain-data")),
                              hw)
    base_init = build_base_model(
        np.random.default_rng(derive_seed(seed, "base-init")), hw,
        len(scenario.pretrain_classes))
    base, base_acc = _train_classifier(
        base_init, pretrain_pool, scenario.base_epochs,
        derive_seed(seed, "base-train"),
        np.random.default_rng(derive_seed(seed, "base-split")),
        scenario.accuracy_floor, "pre-trained base")

    alt_init = build_alt_model(
        np.random.default_rng(derive_seed(seed, "alt-init")), hw,
        len(scenario.pretrain_classes))
    alt_cfg = TrainConfig(epochs=5, batch_size=32, seed=derive_seed(seed, "alt-train"))
    alt, _ = train(alt_init, pretrain_pool, alt_cfg)

    base_id = "glyphnet24"
    records = [
        FingerprintRecord.from_model(base, base_id),
        FingerprintRecord.from_model(alt, "altnet24"),
    ]
    for record in records:
        save_registry_entry(registry_dir, record)

    grid = scale_grid(scenario.paper_grid, scenario.paper_base_layers, base)
    base_count = len(base.layers) - 2

    victims: list[VictimFixture] = []
    pools: dict[str, AttackPools] = {}
    for task in scenario.tasks:
        classes = list(task.classes)
        task_pool = make_pool(classes, scenario.victim_per_class,
                              np.random.default_rng(derive_seed(seed, "task-data",
                                                                task.name)), hw)
        for paper_label, unfrozen in grid:
            head_rng = np.random.default_rng(
                derive_seed(seed, "victim-head", task.name, unfrozen))
            victim = make_victim(base, task.classes, unfrozen, head_rng,
                                 f"task/{task.name}")
            victim, accuracy = _train_classifier(
                victim, task_pool, scenario.victim_epochs,
                derive_seed(seed, "victim-train", task.name, unfrozen),
                np.random.default_rng(derive_seed(seed, "victim-split",
                                                  task.name, unfrozen)),
                scenario.accuracy_floor,
                f"victim {task.name} (unfrozen {unfrozen})")
            package = build_app_package(
                [("model", victim)], classes, suffix=".tflite",
                extras=_decoy_files(np.random.default_rng(
                    derive_seed(seed, "decoys", task.name, unfrozen))))
            package_path = apps_dir / f"{task.name}_u{unfrozen}.zip"
            package_path.write_bytes(package)
            expected_frozen = base_count - unfrozen
            victims.append(VictimFixture(
                task=task.name,
                paper_label=paper_label,
                unfrozen=unfrozen,
                expected_frozen=expected_frozen,
                expected_approach=(APPROACH_FEATURE_EXTRACTION if unfrozen == 0
                                   else APPROACH_FINE_TUNING),
                accuracy=accuracy,
                package_path=package_path,
            ))

        attack_pool = make_pool(classes, scenario.attack_per_class,
                                np.random.default_rng(derive_seed(seed, "attack-pool",
                                                                  task.name)), hw)
        source_pool = make_pool(classes, scenario.source_per_class,
                                np.random.default_rng(derive_seed(seed, "source-pool",
                                                                  task.name)), hw)
        task_dir = pools_dir / task.name
        task_dir.mkdir(parents=True, exist_ok=True)
        np.save(task_dir / "attack_images.npy", attack_pool.images)
        np.save(task_dir / "attack_labels.npy", attack_pool.labels)
        np.save(task_dir / "source_images.npy", source_pool.images)
        np.save(task_dir / "source_labels.npy", source_pool.labels)
        (task_dir / "classes.json").write_text(
            json.dumps(classes) + "\n", encoding="utf-8")
        pools[task.name] = AttackPools(classes, attack_pool, source_pool)

    metadata = {
        "base": {
            "model_id": base_id,
            "accuracy": base_acc,
            "total_layers": len(base.layers),
            "base_layers": base_count,
        },
        "grid": [
            {
                "task": v.task,
                "paper_label": v.paper_label,
                "unfrozen": v.unfrozen,
                "expected_frozen": v.expected_frozen,
                "expected_approach": v.expected_approach,
                "accuracy": v.accuracy,
                "package": v.package_path.name,
            }
            for v in victims
        ],
    }
    (root / "metadata.json").write_text(
        json.dumps(metadata, indent=2) + "\n", encoding="utf-8")

    from .fingerprint import load_registry
    return FixtureSet(
        root=root,
        scenario=scenario,
        registry_dir=registry_dir,
        registry=load_registry(registry_dir),
        base_record_id=base_id,
        victims=victims,
        pools=pools,
        metadata=metadata,
    )


def load_pools(task_dir) -> AttackPools:
    task_dir = Path(task_dir)
    classes = json.loads((task_dir / "classes.json").read_text(encoding="utf-8"))
    return AttackPools(
        class_names=classes,
        attack=LabeledDataset(np.load(task_dir / "attack_images.npy"),
                              np.load(task_dir / "attack_labels.npy")),
        source=LabeledDataset(np.load(task_dir / "source_images.npy"),
                              np.load(task_dir / "source_labels.npy")),
    )


def load_fixtures(root) -> FixtureSet:
    """Reload a fixture directory previously written by make_fixtures."""
    from .fingerprint import load_registry
    root = Path(root)
    scenario = Scenario.from_json(
        json.loads((root / "scenario.json").read_text(encoding="utf-8")))
    metadata = json.loads((root / "metadata.json").read_text(encoding="utf-8"))
    victims = [
        VictimFixture(
            task=entry["task"],
            paper_label=entry["paper_label"],
            unfrozen=entry["unfrozen"],
            expected_frozen=entry["expected_frozen"],
            expected_approach=entry["expected_approach"],
            accuracy=entry["accuracy"],
            package_path=root / "apps" / entry["package"],
        )
        for entry in metadata["grid"]
    ]
    pools = {task.name: load_pools(root / "pools" / task.name)
             for task in scenario.tasks}
    return FixtureSet(
        root=root,
        scenario=scenario,
        registry_dir=root / "registry",
        registry=load_registry(root / "registry"),
        base_record_id=metadata["base"]["model_id"],
        victims=victims,
        pools=pools,
        metadata=metadata,
    )
