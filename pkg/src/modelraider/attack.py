"""Binary adversarial models and adversarial example generation.

Three attack settings are supported:

* ``pma``    - craft adversarials directly on the matched pre-trained
               classifier, ignoring the victim's structure beyond the match.
* ``bama``   - train a 2-class surrogate on the targeted class versus an
               arbitrary counter class, then craft on the surrogate.
* ``e-bama`` - like bama, but the counter class is the victim's most
               error-prone class for the targeted inputs.

The surrogate copies the identified pre-trained base and freezes exactly
the layers the victim froze, so its structural and parametric similarity
to the victim is maximal by construction; only the new 2-class head and
any unfrozen tail layers are trained. Adversarial images come from FGSM,
a fixed-constant C&W L2 minimization, or clipping-aware Gaussian noise,
each holding its perturbation budget exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    F32,
    LabeledDataset,
    Model,
    TrainConfig,
    dense,
    evaluate,
    forward_logits,
    input_gradient,
    input_gradient_from_logits,
    predict_batch,
    softmax,
    train,
)
from .fingerprint import (
    APPROACH_NONE,
    FingerprintRecord,
    TransferReport,
    fingerprint_and_identify,
)
from .util import derive_seed

SETTINGS = ("pma", "bama", "e-bama")
ALGORITHMS = ("fgsm", "cw", "can")

# Per-algorithm default budgets, on the victim's pixel scale.
DEFAULT_EPSILONS = {"fgsm": 0.025, "cw": 0.2, "can": 20.0}

CAN_NORM_RTOL = 1e-3


class AttackError(Exception):
    pass


class NoErrorSignalError(AttackError):
    """Every targeted input was classified correctly; no error-prone class."""


class InsufficientDataError(AttackError):
    pass


class MissingLabelsError(AttackError):
    """The victim package had no usable label file; targeted attacks refuse."""


class NoPretrainedMatchError(AttackError):
    pass


class BudgetExhaustedError(AttackError):
    """Surrogate training ran out of budget below the accuracy constraint."""

    def __init__(self, best_accuracy: float, model: Model):
        self.best_accuracy = best_accuracy
        self.model = model
        super().__init__(
            f"surrogate accuracy constraint not met, best {best_accuracy:.4f}")


# --- error matrix -----------------------------------------------------------

@dataclass
class ErrorMatrix:
    """Victim prediction counts over targeted-class inputs only."""

    counts: np.ndarray
    targeted_index: int
    total: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.sum() != self.total:
            raise ValueError("counts must sum to the number of targeted inputs")


def error_matrix(victim: Model, targeted_images, targeted_index: int) -> ErrorMatrix:
    images = np.asarray(targeted_images, dtype=F32)
    if len(images) == 0:
        raise ValueError("no targeted images supplied")
    preds = predict_batch(victim, images)
    counts = np.bincount(preds, minlength=victim.num_classes)
    return ErrorMatrix(counts, int(targeted_index), len(images))


def most_error_prone(matrix: ErrorMatrix) -> int:
    """Index of the largest count excluding the targeted class; lowest index wins ties."""
    if matrix.counts.size < 2:
        raise ValueError("need at least two classes")
    masked = matrix.counts.copy()
    masked[matrix.targeted_index] = -1
    if masked.max() <= 0:
        raise NoErrorSignalError("no misclassification signal in the error matrix")
    return int(np.argmax(masked))


# --- binary dataset ---------------------------------------------------------

@dataclass
class BinaryDataset:
    """Victim-filtered 2-class data: targeted label 1, counter label 0."""

    train: LabeledDataset
    test: LabeledDataset
    targeted_index: int
    counter_index: int
    retained: dict[str, int] = field(default_factory=dict)


def _filter_correct(victim: Model, images: np.ndarray, label: int) -> np.ndarray:
    preds = predict_batch(victim, images)
    return images[preds == label]


def build_binary_dataset(
    victim: Model,
    targeted_images,
    targeted_index: int,
    counter_images,
    counter_index: int,
    seed: int = 0,
    min_retained: int = 20,
    train_fraction: float = 0.8,
) -> BinaryDataset:
    """Filter pools by victim correctness and split 80/20 per side.

    Raises InsufficientDataError when either side keeps fewer than
    ``min_retained`` images after filtering.
    """
    targeted_images = np.asarray(targeted_images, dtype=F32)
    counter_images = np.asarray(counter_images, dtype=F32)
    if len(targeted_images) == 0 or len(counter_images) == 0:
        raise InsufficientDataError("empty image pool")
    kept_pos = _filter_correct(victim, targeted_images, targeted_index)
    kept_neg = _filter_correct(victim, counter_images, counter_index)
    if len(kept_pos) < min_retained or len(kept_neg) < min_retained:
        raise InsufficientDataError(
            f"retained {len(kept_pos)} targeted / {len(kept_neg)} counter images, "
            f"need at least {min_retained} per side")
    rng = np.random.default_rng(seed)
    parts = {"train_x": [], "train_y": [], "test_x": [], "test_y": []}
    for images, binary_label in ((kept_neg, 0), (kept_pos, 1)):
        order = rng.permutation(len(images))
        cut = int(train_fraction * len(images))
        parts["train_x"].append(images[order[:cut]])
        parts["train_y"].append(np.full(cut, binary_label, dtype=np.int64))
        parts["test_x"].append(images[order[cut:]])
        parts["test_y"].append(np.full(len(images) - cut, binary_label, dtype=np.int64))
    train_x = np.concatenate(parts["train_x"])
    train_y = np.concatenate(parts["train_y"])
    shuffle = rng.permutation(len(train_x))
    return BinaryDataset(
        train=LabeledDataset(train_x[shuffle], train_y[shuffle]),
        test=LabeledDataset(np.concatenate(parts["test_x"]),
                            np.concatenate(parts["test_y"])),
        targeted_index=int(targeted_index),
        counter_index=int(counter_index),
        retained={"targeted": len(kept_pos), "counter": len(kept_neg)},
    )


# --- surrogate model --------------------------------------------------------

def craft_binary_model(
    record: FingerprintRecord,
    report: TransferReport,
    data: BinaryDataset,
    victim_restricted_accuracy: float,
    budget: int = 200,
    seed: int = 0,
) -> tuple[Model, float]:
    """Build and train the 2-class surrogate on the identified base.

    The base is copied from the registry record with the victim's
    frozen-layer count applied, then a fresh 2-class head is trained
    with augmentation until test accuracy reaches the victim's
    restricted accuracy. Running past ``budget`` epochs without meeting
    the constraint raises BudgetExhaustedError carrying the best model
    seen, so callers may proceed with a warning.
    """
    if report.approach == APPROACH_NONE:
        raise ValueError("cannot craft a surrogate without an identified base")
    if record.model is None:
        raise ValueError(f"registry record {record.model_id!r} has no container")
    base_count = record.base_layer_count
    frozen = min(report.frozen_layers, base_count)
    base_layers = [spec.copy() for spec in record.model.layers[:base_count]]
    feature_width = int(np.prod(base_layers[-1].output_shape))

    rng = np.random.default_rng(derive_seed(seed, "binary-head"))
    head_w = rng.normal(0.0, 1.0 / math.sqrt(feature_width),
                        size=(feature_width, 2)).astype(F32)
    head = [
        dense("binary/logits", head_w, np.zeros(2, dtype=F32)),
        softmax("binary/softmax", 2),
    ]
    surrogate = Model(
        layers=base_layers + head,
        input_shape=record.model.input_shape,
        num_classes=2,
        trainable_mask=[i >= frozen for i in range(base_count)] + [True, True],
    )

    cfg = TrainConfig(epochs=budget, batch_size=16, augment=True,
                      seed=derive_seed(seed, "binary-train"))
    best = {"accuracy": -1.0, "model": surrogate}

    def met_constraint(model: Model, stats) -> bool:
        _, accuracy = evaluate(model, data.test.images, data.test.labels)
        if accuracy > best["accuracy"]:
            best["accuracy"] = accuracy
            best["model"] = model.copy()
        return accuracy >= victim_restricted_accuracy

    trained, _ = train(surrogate, data.train, cfg, stop_when=met_constraint)
    _, achieved = evaluate(trained, data.test.images, data.test.labels)
    if achieved >= victim_restricted_accuracy:
        return trained, achieved
    raise BudgetExhaustedError(best["accuracy"], best["model"])


# --- perturbation primitives ------------------------------------------------

def _clamp_linf(x: np.ndarray, candidate: np.ndarray, epsilon: float) -> np.ndarray:
    """Round to float32 while keeping |out - x| <= epsilon exactly."""
    x64 = x.astype(np.float64)
    out = (x64 + np.clip(candidate.astype(np.float64) - x64,
                         -epsilon, epsilon)).astype(F32)
    # float32 rounding of the sum can overshoot by half an ulp; walk back.
    for _ in range(3):
        diff = out.astype(np.float64) - x64
        over = np.abs(diff) > epsilon
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x.astype(F32)[over])
    return out


def fgsm(model: Model, x, label: int, epsilon: float, bounds=(0.0, 1.0)) -> np.ndarray:
    """One signed gradient step of size epsilon, clipped to the pixel bounds."""
    x = np.asarray(x, dtype=F32)
    lo, hi = bounds
    grad = input_gradient(model, x, label)
    candidate = np.clip(x.astype(np.float64)
                        + epsilon * np.sign(grad.astype(np.float64)), lo, hi)
    return np.clip(_clamp_linf(x, candidate, epsilon), lo, hi).astype(F32)


def _l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64)))


def cw_l2(
    model: Model,
    x,
    label: int,
    epsilon: float,
    bounds=(0.0, 1.0),
    steps: int = 200,
    c: float = 1.0,
    kappa: float = 0.0,
    lr: float = 0.05,
) -> np.ndarray | None:
    """C&W-style L2 minimization in tanh space with a fixed trade-off constant.

    Minimizes ||x' - x||^2 + c * max(z_label - max_other z, -kappa) and
    accepts the best candidate only if the model's prediction flips and
    the L2 distance stays within ``epsilon``. Returns None when no
    candidate is accepted.
    """
    x = np.asarray(x, dtype=F32)
    lo, hi = bounds
    span = hi - lo

    logits = forward_logits(model, x[None, ...])[0]
    if int(np.argmax(logits)) != label:
        return x.copy()

    x64 = x.astype(np.float64)
    unit = np.clip((x64 - lo) / span, 1e-6, 1.0 - 1e-6)
    w = np.arctanh(2.0 * unit - 1.0)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    best_image = None
    best_dist = np.inf

    for step in range(1, steps + 1):
        adv = lo + span * (np.tanh(w) + 1.0) / 2.0
        adv32 = adv.astype(F32)
        dlogits = np.zeros(model.num_classes)
        logits, _ = input_gradient_from_logits(model, adv32, dlogits)
        other = int(np.argmax(np.where(np.arange(len(logits)) == label,
                                       -np.inf, logits)))
        margin = float(logits[label] - logits[other])
        if int(np.argmax(logits)) != label:
            dist = _l2(adv32, x)
            if dist < best_dist:
                best_dist = dist
                best_image = adv32.copy()
        grad = 2.0 * (adv - x64)
        if margin > -kappa:
            seed = np.zeros(model.num_classes)
            seed[label] = c
            seed[other] = -c
            _, dx = input_gradient_from_logits(model, adv32, seed)
            grad = grad + dx.astype(np.float64)
        grad_w = grad * (span / 2.0) * (1.0 - np.tanh(w) ** 2)
        m = beta1 * m + (1 - beta1) * grad_w
        v = beta2 * v + (1 - beta2) * grad_w ** 2
        w = w - lr * (m / (1 - beta1 ** step)) / (np.sqrt(v / (1 - beta2 ** step))
                                                  + eps_adam)

    if best_image is not None and best_dist <= epsilon:
        return np.clip(best_image, lo, hi).astype(F32)
    return None


@dataclass
class CanResult:
    image: np.ndarray
    norm: float
    flipped: bool
    feasible: bool


def _can_scale(x64: np.ndarray, delta: np.ndarray, epsilon: float, lo, hi):
    """Scale factor s with ||clip(x + s*delta) - x||_2 = epsilon, by bisection.

    Returns (s, feasible); infeasible means even saturating every pixel
    cannot reach epsilon, in which case s is large enough to saturate.
    """
    def achieved(s: float) -> float:
        return float(np.linalg.norm(np.clip(x64 + s * delta, lo, hi) - x64))

    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        return 0.0, False
    s = epsilon / norm
    if abs(achieved(s) - epsilon) <= CAN_NORM_RTOL * epsilon:
        return s, True  # no clipping active
    limit = float(np.linalg.norm(np.where(delta > 0, hi - x64,
                                          np.where(delta < 0, x64 - lo, 0.0))))
    if limit < epsilon * (1.0 - CAN_NORM_RTOL):
        return 1e9 / max(norm, 1.0), False
    s_lo, s_hi = s, s
    while achieved(s_hi) < epsilon:
        s_hi *= 2.0
    for _ in range(200):
        mid = (s_lo + s_hi) / 2.0
        got = achieved(mid)
        if abs(got - epsilon) <= CAN_NORM_RTOL * epsilon:
            return mid, True
        if got < epsilon:
            s_lo = mid
        else:
            s_hi = mid
    return (s_lo + s_hi) / 2.0, True


def can_noise(
    model: Model,
    x,
    label: int,
    epsilon: float,
    resamples: int = 20,
    bounds=(0.0, 1.0),
    seed: int = 0,
) -> CanResult:
    """Clipping-aware Gaussian noise with best-of-r resampling.

    Each draw is rescaled so the post-clip L2 distance equals epsilon
    (within 1e-3 relative); the first sample that flips the model's
    prediction is returned, else the last sample. When clipping makes
    the target norm unreachable the maximal feasible perturbation is
    returned with ``feasible=False``.
    """
    x = np.asarray(x, dtype=F32)
    lo, hi = bounds
    x64 = x.astype(np.float64)
    rng = np.random.default_rng(seed)
    result = None
    for _ in range(max(1, resamples)):
        delta = rng.standard_normal(x.shape)
        scale, feasible = _can_scale(x64, delta, epsilon, lo, hi)
        adv = np.clip(x64 + scale * delta, lo, hi).astype(F32)
        flipped = int(np.argmax(forward_logits(model, adv[None, ...])[0])) != label
        result = CanResult(adv, _l2(adv, x), flipped, feasible)
        if flipped:
            return result
    return result


# --- evaluation -------------------------------------------------------------

@dataclass
class ImageOutcome:
    index: int
    victim_prediction: int
    success: bool
    l2: float
    linf: float


@dataclass
class AttackRun:
    """Outcome of one attack: m of t source images changed the victim's answer."""

    setting: str
    algorithm: str
    epsilon: float
    target_index: int
    m: int
    t: int
    outcomes: list[ImageOutcome] = field(default_factory=list)
    target_class: str | None = None
    counter_index: int | None = None
    counter_class: str | None = None
    seed: int | None = None
    surrogate_accuracy: float | None = None
    warnings: list[str] = field(default_factory=list)
    adversarials: np.ndarray | None = None

    @property
    def asr(self) -> float:
        return self.m / self.t

    def to_json(self) -> dict:
        return {
            "setting": self.setting,
            "algorithm": self.algorithm,
            "epsilon": self.epsilon,
            "target_index": self.target_index,
            "target_class": self.target_class,
            "counter_index": self.counter_index,
            "counter_class": self.counter_class,
            "m": self.m,
            "t": self.t,
            "asr": self.asr,
            "seed": self.seed,
            "surrogate_accuracy": self.surrogate_accuracy,
            "warnings": list(self.warnings),
            "per_image": [
                {
                    "index": o.index,
                    "victim_prediction": o.victim_prediction,
                    "success": o.success,
                    "l2": o.l2,
                    "linf": o.linf,
                }
                for o in self.outcomes
            ],
        }


def evaluate_asr(
    victim: Model,
    sources,
    adversarials,
    target_index: int,
    **metadata,
) -> AttackRun:
    """ASR = m/t over adversarial images whose sources the victim got right."""
    sources = np.asarray(sources, dtype=F32)
    adversarials = np.asarray(adversarials, dtype=F32)
    if len(adversarials) == 0:
        raise ValueError("no adversarial images to evaluate")
    preds = predict_batch(victim, adversarials)
    outcomes = []
    for i, pred in enumerate(preds):
        diff = adversarials[i].astype(np.float64) - sources[i].astype(np.float64)
        outcomes.append(ImageOutcome(
            index=i,
            victim_prediction=int(pred),
            success=bool(pred != target_index),
            l2=float(np.linalg.norm(diff)),
            linf=float(np.abs(diff).max()),
        ))
    m = sum(o.success for o in outcomes)
    return AttackRun(
        setting=metadata.pop("setting", ""),
        algorithm=metadata.pop("algorithm", ""),
        epsilon=metadata.pop("epsilon", float("nan")),
        target_index=int(target_index),
        m=m,
        t=len(outcomes),
        outcomes=outcomes,
        adversarials=adversarials,
        **metadata,
    )


# --- full attack runs -------------------------------------------------------

@dataclass
class AttackConfig:
    """Algorithm, budget and seeding for one attack run.

    ``epsilon`` defaults to the algorithm's standard budget and is
    interpreted on the victim's pixel scale given by ``bounds``.
    """

    algorithm: str = "can"
    epsilon: float | None = None
    bounds: tuple[float, float] = (0.0, 1.0)
    cw_steps: int = 200
    cw_c: float = 1.0
    cw_kappa: float = 0.0
    cw_lr: float = 0.05
    can_resamples: int = 20
    seed: int = 0
    source_count: int = 50
    min_retained: int = 20
    surrogate_budget: int = 200
    threshold: float = 0.8

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.epsilon is None:
            self.epsilon = DEFAULT_EPSILONS[self.algorithm]
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError("bounds must satisfy lo < hi")


@dataclass
class AttackPools:
    """Victim-space image pools used to build surrogates and source images.

    ``attack`` feeds the error matrix and the binary dataset; ``source``
    supplies the images actually perturbed and scored. Labels index into
    ``class_names``, which must match the victim's label file order.
    """

    class_names: list[str]
    attack: LabeledDataset
    source: LabeledDataset


def _perturb(surrogate: Model, x: np.ndarray, label: int, cfg: AttackConfig,
             image_seed: int) -> np.ndarray:
    if cfg.algorithm == "fgsm":
        return fgsm(surrogate, x, label, cfg.epsilon, cfg.bounds)
    if cfg.algorithm == "cw":
        adv = cw_l2(surrogate, x, label, cfg.epsilon, cfg.bounds,
                    steps=cfg.cw_steps, c=cfg.cw_c, kappa=cfg.cw_kappa,
                    lr=cfg.cw_lr)
        return adv if adv is not None else x.copy()
    return can_noise(surrogate, x, label, cfg.epsilon, cfg.can_resamples,
                     cfg.bounds, seed=image_seed).image


def run_attack(
    setting: str,
    victim: Model,
    victim_labels: list[str] | None,
    registry: list,
    pools: AttackPools,
    cfg: AttackConfig,
    target_class: str,
) -> AttackRun:
    """Full attack pipeline for one victim model and one targeted class.

    The victim must already be extracted; the registry supplies the
    pre-trained candidates. Raises MissingLabelsError when the victim has
    no usable label file (a targeted class cannot be chosen without one).
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    if victim_labels is None:
        raise MissingLabelsError(
            "victim has no usable label file; refusing targeted attack")
    if target_class not in victim_labels:
        raise ValueError(f"target class {target_class!r} not among victim labels")
    if pools.class_names != list(victim_labels):
        raise ValueError("pool class names do not match victim labels")
    target_index = victim_labels.index(target_class)

    report = fingerprint_and_identify(victim, registry, cfg.threshold)
    if report.approach == APPROACH_NONE:
        raise NoPretrainedMatchError(
            f"no registry entry above threshold (best stru_sim {report.stru_sim:.3f})")
    record = next(r for r in registry if r.model_id == report.matched)

    warnings: list[str] = []
    rng = np.random.default_rng(derive_seed(cfg.seed, "attack", setting))

    source_pool = pools.source.of_class(target_index)
    if len(source_pool) == 0:
        raise InsufficientDataError("no source images for the targeted class")
    correct = predict_batch(victim, source_pool) == target_index
    sources = source_pool[correct]
    if len(sources) < cfg.source_count:
        raise InsufficientDataError(
            f"only {len(sources)} correctly classified source images, "
            f"need {cfg.source_count}")
    sources = sources[:cfg.source_count]

    counter_index: int | None = None
    surrogate_accuracy: float | None = None
    if setting == "pma":
        if record.model is None:
            raise ValueError(f"registry record {record.model_id!r} has no container")
        surrogate = record.model
        craft_labels = predict_batch(surrogate, sources)
    else:
        others = [i for i in range(len(victim_labels)) if i != target_index]
        if setting == "e-bama":
            try:
                matrix = error_matrix(victim, pools.attack.of_class(target_index),
                                      target_index)
                counter_index = most_error_prone(matrix)
            except NoErrorSignalError:
                warnings.append("no error signal; falling back to an arbitrary "
                                "counter class")
                counter_index = int(rng.choice(others))
        else:
            counter_index = int(rng.choice(others))
        targeted_pool = pools.attack.of_class(target_index)
        counter_pool = pools.attack.of_class(counter_index)
        dataset = build_binary_dataset(
            victim, targeted_pool, target_index, counter_pool, counter_index,
            seed=derive_seed(cfg.seed, "split", setting),
            min_retained=cfg.min_retained)
        restricted = _restricted_accuracy(victim, targeted_pool, target_index,
                                          counter_pool, counter_index)
        try:
            surrogate, surrogate_accuracy = craft_binary_model(
                record, report, dataset, restricted,
                budget=cfg.surrogate_budget,
                seed=derive_seed(cfg.seed, "surrogate", setting))
        except BudgetExhaustedError as exc:
            warnings.append(f"surrogate below constraint ({exc.best_accuracy:.3f} "
                            f"< {restricted:.3f}); proceeding best-effort")
            surrogate, surrogate_accuracy = exc.model, exc.best_accuracy
        craft_labels = np.ones(len(sources), dtype=np.int64)

    adversarials = np.stack([
        _perturb(surrogate, sources[i], int(craft_labels[i]), cfg,
                 derive_seed(cfg.seed, "image", setting, i))
        for i in range(len(sources))
    ])

    return evaluate_asr(
        victim, sources, adversarials, target_index,
        setting=setting,
        algorithm=cfg.algorithm,
        epsilon=cfg.epsilon,
        target_class=target_class,
        counter_index=counter_index,
        counter_class=(victim_labels[counter_index]
                       if counter_index is not None else None),
        seed=cfg.seed,
        surrogate_accuracy=surrogate_accuracy,
        warnings=warnings,
    )


def _restricted_accuracy(victim: Model, targeted_pool, target_index: int,
                         counter_pool, counter_index: int) -> float:
    """Victim accuracy restricted to the two participating classes."""
    preds_t = predict_batch(victim, targeted_pool)
    preds_c = predict_batch(victim, counter_pool)
    correct = int((preds_t == target_index).sum() + (preds_c == counter_index).sum())
    return correct / (len(targeted_pool) + len(counter_pool))
