"""Procedural desk-scale datasets and the incremental-learning protocols.

Every class gets a smooth signature template plus a small class-specific
color accent; samples are that signature plus seeded smooth jitter and
pixel noise, so a spec + seed pins every pixel. Domain shifts are
label-preserving transforms of those samples. Train and test splits draw
from disjoint seed streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter

from . import tensor as T
from . import vit
from .errors import ContractError, DataError
from .experts import AdamW, TrainConfig

__all__ = [
    "SyntheticImageSpec",
    "LabeledSet",
    "Update",
    "DatasetSequence",
    "DOMAIN_TRANSFORMS",
    "DEFAULT_DIL_DOMAINS",
    "PretrainOutcome",
    "apply_domain",
    "generate_dil_sequence",
    "generate_cil_sequence",
    "generate_pretraining_pool",
    "pretrain_backbone",
]

# seed-stream tags keeping templates, samples, and the pool disjoint
_TAG_TEMPLATE, _TAG_SAMPLE, _TAG_POOL, _TAG_NOISE, _TAG_CHROMA = 0, 1, 2, 3, 4
_POOL_CLASS_BASE = 10_000
_TRAIN_SPLIT, _TEST_SPLIT = 0, 1

# zero-sum chroma basis: shifts here change hue balance, not luminance,
# which is what survives the backbone's per-token normalization
_CHROMA_E1 = np.array([1.0, 0.0, -1.0]) / math.sqrt(2.0)
_CHROMA_E2 = np.array([1.0, -2.0, 1.0]) / math.sqrt(6.0)
_CHROMA_RADIUS = 0.6
_CLASS_CHROMA_RADIUS = 0.18
_GOLDEN_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0
_SILVER_CONJUGATE = math.sqrt(2.0) - 1.0


@dataclass(frozen=True)
class SyntheticImageSpec:
    """Generator settings. margin dials class separability from 0 to 1.

    orientation_cue adds a fixed luminance ramp shared by all classes; it
    plays the role of a scene's global orientation (sky up), which is what
    makes rotation domains identifiable at the feature level.
    """

    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 16
    margin: float = 1.0
    jitter: float = 0.02
    pixel_noise: float = 0.02
    orientation_cue: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractError("class and sample counts must be positive")
        if not 0.0 <= self.margin <= 1.0:
            raise ContractError(f"margin must lie in [0, 1], got {self.margin}")
        if self.image_size % 4 != 0:
            raise ContractError("image_size must be a multiple of 4")


@dataclass
class LabeledSet:
    images: np.ndarray  # (n, s, s, 3) in [0, 1]
    labels: np.ndarray  # (n,) global class ids

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images, {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)


@dataclass
class Update:
    """One continual-learning step: a dataset with its label map."""

    dataset_id: str
    train: LabeledSet
    test: LabeledSet
    label_map: tuple
    domain: str = "identity"


@dataclass
class DatasetSequence:
    scenario: str  # dil | cil | til
    updates: list
    pretraining_pool: Update | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scenario not in ("dil", "cil", "til"):
            raise ContractError(f"unknown scenario {self.scenario!r}")
        if not self.updates:
            raise ContractError("sequence has no updates")
        ids = [u.dataset_id for u in self.updates]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate dataset ids: {ids}")
        maps = [u.label_map for u in self.updates]
        if self.scenario == "dil":
            if any(m != maps[0] for m in maps):
                raise ContractError("domain-incremental updates must share one label_map")
        else:
            seen = set()
            for m in maps:
                overlap = seen & set(m)
                if overlap:
                    raise ContractError(
                        f"class-incremental label_maps overlap on {sorted(overlap)}")
                seen |= set(m)
        for u in self.updates:
            for split in (u.train, u.test):
                outside = set(np.unique(split.labels)) - set(u.label_map)
                if outside:
                    raise DataError(
                        f"update {u.dataset_id!r} contains labels {sorted(outside)} "
                        f"outside its label_map")


def _smooth_field(rng: np.random.Generator, n: int, size: int,
                  cells: int) -> np.ndarray:
    """(n, size, size, 3) smooth random fields built from a coarse grid."""
    grid = rng.normal(size=(n, cells, cells, 3))
    reps = size // cells
    up = np.kron(grid, np.ones((1, reps, reps, 1)))
    return uniform_filter(up, size=(1, reps + 1, reps + 1, 1), mode="wrap")


def _class_template(class_id: int, spec: SyntheticImageSpec,
                    tag: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, tag, class_id])
    field_ = _smooth_field(rng, 1, spec.image_size, cells=4)[0]
    field_ -= field_.mean()
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def _class_chroma(class_id: int, spec: SyntheticImageSpec) -> np.ndarray:
    """Per-class zero-sum color accent.

    The smooth templates are zero-mean by construction, so classes would
    otherwise share identical low-order color statistics and differ only
    in texture, which a small frozen encoder does not expose reliably.
    Real image classes do differ in color statistics, and that is what
    makes dataset identification from frozen features workable. Two
    low-discrepancy sequences (golden angle, shifted-silver radius)
    spread any block of consecutive class ids over the chroma disc; a
    seed-wide rotation ties the palette to the data seed without
    changing the spacings.
    """
    rotation = np.random.default_rng([spec.seed, _TAG_CHROMA]).uniform(
        0.0, 2.0 * math.pi)
    theta = 2.0 * math.pi * ((class_id * _GOLDEN_CONJUGATE) % 1.0) + rotation
    radial = 0.45 + 0.55 * ((class_id * _SILVER_CONJUGATE) % 1.0)
    return _CLASS_CHROMA_RADIUS * radial * (math.cos(theta) * _CHROMA_E1
                                            + math.sin(theta) * _CHROMA_E2)


def _sample_class(class_id: int, n: int, spec: SyntheticImageSpec, *,
                  template_tag: int, domain_index: int, split: int) -> np.ndarray:
    template = _class_template(class_id, spec, template_tag)
    rng = np.random.default_rng(
        [spec.seed, _TAG_SAMPLE, template_tag, class_id, domain_index, split])
    jitter = _smooth_field(rng, n, spec.image_size, cells=4)
    # per-channel zero mean: jitter varies texture without recoloring the
    # sample, so the class accent stays the only systematic color signal
    jitter -= jitter.mean(axis=(1, 2), keepdims=True)
    jitter *= spec.jitter
    noise = rng.normal(scale=spec.pixel_noise, size=(n,) + template.shape)
    ramp = np.linspace(-1.0, 1.0, spec.image_size)[:, None, None]
    accent = spec.margin * _class_chroma(class_id, spec)
    images = (0.5 + 0.45 * spec.margin * template + spec.orientation_cue * ramp
              + accent + jitter + noise)
    return np.clip(images, 0.0, 1.0)


# ------------------------------------------------------------------ domains


def _color_shift(images, delta):
    return np.clip(images + np.asarray(delta), 0.0, 1.0)


def _blur(images, passes=2):
    out = images
    for _ in range(passes):
        out = uniform_filter(out, size=(1, 3, 3, 1), mode="wrap")
    return out


def _hue_delta(angle_deg: float) -> np.ndarray:
    theta = math.radians(angle_deg)
    return _CHROMA_RADIUS * (math.cos(theta) * _CHROMA_E1
                             + math.sin(theta) * _CHROMA_E2)


def _make_transforms():
    transforms = {
        "identity": lambda imgs, rng: imgs,
        "rotate90": lambda imgs, rng: np.rot90(imgs, 1, axes=(1, 2)).copy(),
        "rotate180": lambda imgs, rng: np.rot90(imgs, 2, axes=(1, 2)).copy(),
        "color_warm": lambda imgs, rng: _color_shift(imgs, (0.30, 0.0, -0.30)),
        "color_cool": lambda imgs, rng: _color_shift(imgs, (-0.30, 0.0, 0.30)),
        "blur": lambda imgs, rng: _blur(imgs),
        "noise": lambda imgs, rng: np.clip(
            imgs + rng.normal(scale=0.15, size=imgs.shape), 0.0, 1.0),
    }
    for angle in range(0, 360, 60):
        delta = _hue_delta(angle)
        transforms[f"hue_{angle}"] = (
            lambda imgs, rng, d=delta: _color_shift(imgs, d))
    return transforms


DOMAIN_TRANSFORMS = _make_transforms()

# six color-grade styles, mutually separable in frozen-feature space
DEFAULT_DIL_DOMAINS = ("hue_0", "hue_60", "hue_120",
                       "hue_180", "hue_240", "hue_300")


def apply_domain(images: np.ndarray, domain: str,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    if domain not in DOMAIN_TRANSFORMS:
        raise ContractError(
            f"unknown domain {domain!r}; expected one of {sorted(DOMAIN_TRANSFORMS)}")
    if rng is None:
        rng = np.random.default_rng(0)
    return DOMAIN_TRANSFORMS[domain](images, rng)


def _build_split(classes, spec, *, template_tag, domain, domain_index, split,
                 per_class) -> LabeledSet:
    images, labels = [], []
    for c in classes:
        raw = _sample_class(c, per_class, spec, template_tag=template_tag,
                            domain_index=domain_index, split=split)
        rng = np.random.default_rng(
            [spec.seed, _TAG_NOISE, template_tag, c, domain_index, split])
        images.append(apply_domain(raw, domain, rng))
        labels.extend([c] * per_class)
    return LabeledSet(images=np.concatenate(images), labels=np.array(labels))


# ---------------------------------------------------------------- sequences


def generate_dil_sequence(spec: SyntheticImageSpec, num_domains: int = 6,
                          domains=None) -> DatasetSequence:
    """Same classes in every update, one distinct domain transform each."""
    if num_domains < 1:
        raise ContractError(f"num_domains must be >= 1, got {num_domains}")
    if domains is None:
        if num_domains > len(DEFAULT_DIL_DOMAINS):
            raise ContractError(
                f"only {len(DEFAULT_DIL_DOMAINS)} default domains exist; "
                f"pass an explicit domain list for {num_domains}")
        domains = DEFAULT_DIL_DOMAINS[:num_domains]
    if len(domains) != num_domains:
        raise ContractError(
            f"{num_domains} domains requested but {len(domains)} supplied")
    if len(set(domains)) != len(domains):
        raise ContractError(f"domains must be distinct, got {domains}")

    classes = tuple(range(spec.num_classes))
    updates = []
    for d_idx, domain in enumerate(domains):
        train = _build_split(classes, spec, template_tag=_TAG_TEMPLATE,
                             domain=domain, domain_index=d_idx,
                             split=_TRAIN_SPLIT, per_class=spec.train_per_class)
        test = _build_split(classes, spec, template_tag=_TAG_TEMPLATE,
                            domain=domain, domain_index=d_idx,
                            split=_TEST_SPLIT, per_class=spec.test_per_class)
        updates.append(Update(dataset_id=f"domain_{d_idx}_{domain}",
                              train=train, test=test, label_map=classes,
                              domain=domain))
    return DatasetSequence(scenario="dil", updates=updates)


def generate_cil_sequence(spec: SyntheticImageSpec, num_updates: int = 10,
                          classes_per_update: int = 4,
                          scenario: str = "cil") -> DatasetSequence:
    """Contiguous disjoint class blocks, identity domain throughout."""
    if num_updates * classes_per_update != spec.num_classes:
        raise ContractError(
            f"{num_updates} updates x {classes_per_update} classes != "
            f"{spec.num_classes} total classes")
    updates = []
    for u in range(num_updates):
        classes = tuple(range(u * classes_per_update, (u + 1) * classes_per_update))
        train = _build_split(classes, spec, template_tag=_TAG_TEMPLATE,
                             domain="identity", domain_index=0,
                             split=_TRAIN_SPLIT, per_class=spec.train_per_class)
        test = _build_split(classes, spec, template_tag=_TAG_TEMPLATE,
                            domain="identity", domain_index=0,
                            split=_TEST_SPLIT, per_class=spec.test_per_class)
        updates.append(Update(dataset_id=f"classes_{classes[0]}_{classes[-1]}",
                              train=train, test=test, label_map=classes))
    return DatasetSequence(scenario=scenario, updates=updates)


def generate_pretraining_pool(spec: SyntheticImageSpec,
                              num_classes: int = 20,
                              train_per_class: int = 100,
                              test_per_class: int = 30) -> Update:
    """Classes drawn from a seed stream disjoint from all sequence data."""
    pool_spec = replace(spec, num_classes=num_classes,
                        train_per_class=train_per_class,
                        test_per_class=test_per_class)
    classes = tuple(_POOL_CLASS_BASE + c for c in range(num_classes))
    train = _build_split(classes, pool_spec, template_tag=_TAG_POOL,
                         domain="identity", domain_index=0,
                         split=_TRAIN_SPLIT, per_class=train_per_class)
    test = _build_split(classes, pool_spec, template_tag=_TAG_POOL,
                        domain="identity", domain_index=0,
                        split=_TEST_SPLIT, per_class=test_per_class)
    return Update(dataset_id="pretraining_pool", train=train, test=test,
                  label_map=classes)


# -------------------------------------------------------------- pretraining


@dataclass
class PretrainOutcome:
    params: vit.ViTParams
    pool_accuracy: float
    log: list = field(default_factory=list)


def pretrain_backbone(pool: Update, model_config: vit.ModelConfig | None = None,
                      cfg: TrainConfig | None = None,
                      target_accuracy: float = 0.8) -> PretrainOutcome:
    """Train the whole backbone plus a throwaway head on the pool, then freeze.

    The head is discarded; only the frozen feature extractor survives.
    """
    model_config = model_config or vit.ModelConfig()
    cfg = cfg or TrainConfig(epochs=30, learning_rate=3e-3)
    params = vit.init_params(model_config, seed=cfg.seed, trainable=True)

    label_map = tuple(pool.label_map)
    index_of = {c: i for i, c in enumerate(label_map)}
    local = np.array([index_of[int(c)] for c in pool.train.labels])
    images = pool.train.images
    n = len(images)
    patches = vit.patchify(images, model_config)

    head_rng = np.random.default_rng([cfg.seed, 4])
    w = T.Tensor(T.truncated_normal(head_rng, (model_config.embed_dim, len(label_map))),
                 requires_grad=True)
    b = T.zeros((len(label_map),), requires_grad=True)
    trainables = list(params.named_tensors()) + [("head.w", w), ("head.b", b)]

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    optimizer = AdamW(trainables, cfg, cfg.epochs * steps_per_epoch)
    shuffle_rng = np.random.default_rng([cfg.seed, 5])
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        hits = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            feats = vit.forward_batch(None, params, patches=patches[idx])
            logits = T.add(T.matmul(feats, w), b)
            loss = T.cross_entropy(logits, local[idx])
            hits += int((logits.data.argmax(axis=1) == local[idx]).sum())
            losses.append(loss.item())
            T.backward(loss)
            optimizer.step(step)
            step += 1
        log.append({"epoch": epoch, "loss": float(np.mean(losses)),
                    "accuracy": hits / n})

    params.freeze()
    test_local = np.array([index_of[int(c)] for c in pool.test.labels])
    feats = vit.embed_images(pool.test.images, params)
    logits = feats @ w.data + b.data
    accuracy = float((logits.argmax(axis=1) == test_local).mean())
    if accuracy < target_accuracy:
        raise DataError(
            f"pretraining reached held-out accuracy {accuracy:.3f}, "
            f"below the {target_accuracy:.2f} threshold")
    return PretrainOutcome(params=params, pool_accuracy=accuracy, log=log)
