"""Run orchestration: configuration, continual loops, sweeps, reports.

Five methods share one engine. `color` trains an adapter expert per
dataset and routes test inputs to experts through nearest prototype
centroids computed from frozen-backbone features; `colorpp` does the
same but computes prototypes with the first expert's adapted features;
`oracle` is handed the true dataset id at evaluation time (the
task-incremental protocol); `ftseq` fine-tunes one shared full model
sequentially with absent-class logits masked to -inf during training;
`joint` trains a single adapter expert on the union of all updates and
serves as the run's upper reference.

Everything here is deterministic given a RunConfig: repeats perturb the
expert-init and k-means seeds only, the data seed stays fixed.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import checkpoint as ckpt
from . import lora
from . import router as routing
from . import scenarios
from . import tensor as T
from . import vit
from .errors import ConfigError, ContractError, DataError, LoraclError, StorageError
from .experts import (AdamW, ClassifierHead, Expert, TrainConfig, predict_batch,
                      train_expert)
from .metrics import AccuracyMatrix, average_accuracy, forgetting

__all__ = [
    "METHODS", "SCENARIOS", "CSV_COLUMNS", "OUTPUT_ROOT_ENV",
    "RunConfig", "UpdateRow", "RunRecord", "RunState",
    "config_from_mapping", "build_sequence", "prepare_backbone",
    "save_backbone", "load_backbone", "install_backbone",
    "run_identifier", "execute_run", "run_continual", "run_ftseq_baseline",
    "run_joint_upper_bound", "sweep", "summarize", "write_results_csv",
    "report", "save_run_state", "load_run_state", "replay_evaluation",
    "export_dataset",
]

METHODS = ("color", "colorpp", "oracle", "ftseq", "joint")
SCENARIOS = ("dil", "cil", "til")
OUTPUT_ROOT_ENV = "LORACL_OUTPUT_ROOT"

CSV_COLUMNS = ("run_id", "method", "scenario", "update_index", "rank",
               "clusters", "seed", "avg_acc", "forgetting", "routing_acc",
               "params_trainable", "wall_ms")


# ------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RunConfig:
    """One experiment. Defaults are the desk-scale presets.

    num_classes == 0 means the scenario default (10 domain-incremental,
    num_updates * classes_per_update otherwise); clusters == 0 means the
    documented default (5 for dil, 2 * classes_per_update for cil/til).
    """

    scenario: str = "dil"
    method: str = "color"
    # data
    num_classes: int = 0
    num_domains: int = 6
    num_updates: int = 10
    classes_per_update: int = 4
    train_per_class: int = 100
    test_per_class: int = 50
    margin: float = 1.0
    image_size: int = 16
    # backbone
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_hidden_dim: int = 64
    patch_size: int = 4
    # expert training
    rank: int = 8
    clusters: int = 0
    epochs: int = 30
    learning_rate: float = 1e-2
    batch_size: int = 128
    weight_decay: float = 2e-4
    # backbone pretraining
    pool_classes: int = 20
    pool_train_per_class: int = 100
    pool_test_per_class: int = 30
    pretrain_epochs: int = 50
    pretrain_learning_rate: float = 3e-3
    # protocol
    data_seed: int = 0
    init_seed: int = 0
    kmeans_seed: int = 0
    repeats: int = 3
    output_dir: str = ""

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(
                f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.method not in METHODS:
            raise ConfigError(
                f"method must be one of {METHODS}, got {self.method!r}")
        positives = ("num_domains", "num_updates", "classes_per_update",
                     "train_per_class", "test_per_class", "rank", "epochs",
                     "batch_size", "pool_classes", "pool_train_per_class",
                     "pool_test_per_class", "pretrain_epochs", "repeats")
        for name in positives:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("num_classes", "clusters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.learning_rate <= 0 or self.pretrain_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.margin <= 1.0:
            raise ConfigError(f"margin must lie in [0, 1], got {self.margin}")
        if self.scenario in ("cil", "til") and self.num_classes:
            expected = self.num_updates * self.classes_per_update
            if self.num_classes != expected:
                raise ConfigError(
                    f"num_classes {self.num_classes} != num_updates x "
                    f"classes_per_update = {expected}")
        # surfaces shape problems (head/patch divisibility) before training
        self.model_config()
        self.train_config()

    def resolved_num_classes(self) -> int:
        if self.num_classes:
            return self.num_classes
        if self.scenario == "dil":
            return 10
        return self.num_updates * self.classes_per_update

    def resolved_clusters(self) -> int:
        if self.clusters:
            return self.clusters
        if self.scenario == "dil":
            return 5
        return 2 * self.classes_per_update

    def model_config(self) -> vit.ModelConfig:
        return vit.ModelConfig(
            image_size=self.image_size, channels=3, patch_size=self.patch_size,
            embed_dim=self.embed_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_hidden_dim=self.ffn_hidden_dim)

    def image_spec(self) -> scenarios.SyntheticImageSpec:
        return scenarios.SyntheticImageSpec(
            num_classes=self.resolved_num_classes(),
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            image_size=self.image_size, margin=self.margin,
            seed=self.data_seed)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, weight_decay=self.weight_decay,
            epochs=self.epochs, learning_rate=self.learning_rate,
            rank=self.rank, seed=seed)


def config_from_mapping(mapping) -> RunConfig:
    """Build a RunConfig from string-ish key/value pairs (config files)."""
    by_name = {f.name: f for f in fields(RunConfig)}
    kwargs = {}
    for key, raw in dict(mapping).items():
        f = by_name.get(key)
        if f is None:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = type(f.default)
        try:
            if kind is int and isinstance(raw, str):
                kwargs[key] = int(raw, 10)
            else:
                kwargs[key] = kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(
                f"cannot read {key!r}={raw!r} as {kind.__name__}: {exc}") from exc
    return RunConfig(**kwargs)


def run_identifier(cfg: RunConfig, repeat: int = 0) -> str:
    """Stable id hashed from the experiment settings (output_dir excluded)."""
    payload = asdict(cfg)
    payload.pop("output_dir")
    payload["repeat"] = int(repeat)
    digest = hashlib.sha256(_canonical_json(payload).encode("ascii"))
    return digest.hexdigest()[:12]


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------- data/model


def build_sequence(cfg: RunConfig) -> scenarios.DatasetSequence:
    spec = cfg.image_spec()
    if cfg.scenario == "dil":
        return scenarios.generate_dil_sequence(spec, num_domains=cfg.num_domains)
    return scenarios.generate_cil_sequence(
        spec, num_updates=cfg.num_updates,
        classes_per_update=cfg.classes_per_update, scenario=cfg.scenario)


_BACKBONE_CACHE: dict = {}


def _backbone_key(cfg: RunConfig):
    return (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.num_layers,
            cfg.num_heads, cfg.ffn_hidden_dim, cfg.margin, cfg.data_seed,
            cfg.pool_classes, cfg.pool_train_per_class, cfg.pool_test_per_class,
            cfg.pretrain_epochs, cfg.pretrain_learning_rate, cfg.batch_size)


def prepare_backbone(cfg: RunConfig, cache: dict | None = _BACKBONE_CACHE,
                     ) -> scenarios.PretrainOutcome:
    """Pretrain (or fetch the cached) frozen backbone for this config.

    The pool and the optimizer are seeded from data_seed alone, so every
    repeat of a run shares one backbone, mirroring a fixed pretrained
    checkpoint at full scale.
    """
    key = _backbone_key(cfg)
    if cache is not None and key in cache:
        return cache[key]
    pool = scenarios.generate_pretraining_pool(
        cfg.image_spec(), num_classes=cfg.pool_classes,
        train_per_class=cfg.pool_train_per_class,
        test_per_class=cfg.pool_test_per_class)
    outcome = scenarios.pretrain_backbone(
        pool, cfg.model_config(),
        TrainConfig(batch_size=cfg.batch_size, epochs=cfg.pretrain_epochs,
                    learning_rate=cfg.pretrain_learning_rate,
                    seed=cfg.data_seed))
    if cache is not None:
        cache[key] = outcome
    return outcome


def save_backbone(outcome: scenarios.PretrainOutcome, path) -> str:
    tensors = [(f"backbone.{name}", tensor.data)
               for name, tensor in outcome.params.named_tensors()]
    model = outcome.params.config
    metadata = {"kind": "backbone", "pool_accuracy": outcome.pool_accuracy,
                "model": {f.name: getattr(model, f.name)
                          for f in fields(vit.ModelConfig)}}
    ckpt.save_checkpoint(tensors, path, metadata=metadata)
    return str(path)


def load_backbone(path) -> scenarios.PretrainOutcome:
    arrays, metadata = ckpt.load_checkpoint(path)
    if metadata.get("kind") != "backbone":
        raise DataError(f"{path} is not a backbone checkpoint")
    model_config = vit.ModelConfig(**metadata["model"])
    params = _backbone_from_arrays(model_config, arrays)
    return scenarios.PretrainOutcome(params=params,
                                     pool_accuracy=metadata["pool_accuracy"])


def install_backbone(cfg: RunConfig, outcome: scenarios.PretrainOutcome,
                     cache: dict | None = _BACKBONE_CACHE):
    """Register a loaded backbone so runs of cfg skip pretraining."""
    model = outcome.params.config
    if model != cfg.model_config():
        raise ConfigError(
            f"backbone was trained for {model}, run expects {cfg.model_config()}")
    cache[_backbone_key(cfg)] = outcome


# -------------------------------------------------------------- run records


@dataclass(frozen=True)
class UpdateRow:
    update_index: int
    avg_acc: float
    forgetting: float | None
    routing_acc: float | None
    wall_ms: float


@dataclass
class RunRecord:
    run_id: str
    config: RunConfig
    repeat: int
    seed: int
    rows: list
    params_trainable: int
    pool_accuracy: float

    @property
    def final_avg_acc(self) -> float:
        return self.rows[-1].avg_acc

    @property
    def final_forgetting(self) -> float | None:
        return self.rows[-1].forgetting

    @property
    def final_routing_acc(self) -> float | None:
        return self.rows[-1].routing_acc


@dataclass
class RunState:
    """Everything needed to re-run evaluation after a continual run."""

    config: RunConfig
    backbone: vit.ViTParams
    experts_by_id: dict
    dataset_order: list
    router: routing.Router | None
    metrics: dict


class _Phase:
    """Annotates module errors with the update index and phase."""

    def __init__(self, t: int, name: str):
        self.t, self.name = t, name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, LoraclError):
            raise type(exc)(f"update {self.t}, {self.name} phase: {exc}") from exc
        return False


# ----------------------------------------------------------------- training


def _data_digest(labeled: scenarios.LabeledSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(labeled.images).tobytes())
    h.update(np.ascontiguousarray(labeled.labels).tobytes())
    return h.hexdigest()[:16]


def _train_update_expert(backbone, update, tcfg: TrainConfig,
                         cache: dict | None, backbone_token) -> Expert:
    key = None
    if cache is not None:
        key = (backbone_token, update.dataset_id, _data_digest(update.train),
               tcfg)
        hit = cache.get(key)
        if hit is not None:
            return hit
    expert = train_expert(backbone, update.train.images, update.train.labels,
                          tcfg, label_map=update.label_map,
                          dataset_id=update.dataset_id)
    if cache is not None:
        cache[key] = expert
    return expert


# --------------------------------------------------------------- evaluation


def _routing_features(tau, sequence, backbone, extractor_tag, first_expert,
                      cache):
    key = ("route", tau)
    if key not in cache:
        images = sequence.updates[tau - 1].test.images
        cache[key] = routing.extract_features(images, backbone, extractor_tag,
                                              first_expert)
    return cache[key]


def _prediction_features(tau, dataset_id, sequence, backbone, experts, cache):
    key = ("pred", tau, dataset_id)
    if key not in cache:
        images = sequence.updates[tau - 1].test.images
        cache[key] = vit.embed_images(images, backbone,
                                      adapters=experts[dataset_id].adapter_set)
    return cache[key]


def _evaluate_round(t, sequence, backbone, experts, router_obj, oracle_routing,
                    first_expert, feature_cache, matrix):
    """Round t: score test sets 1..t, record matrix entries.

    Returns (routing accuracy pooled over the round, per-set correct counts).
    """
    hits = 0
    total = 0
    row_correct = {}
    for tau in range(1, t + 1):
        update = sequence.updates[tau - 1]
        labels = np.asarray(update.test.labels)
        n = len(labels)
        if oracle_routing:
            routed = np.full(n, update.dataset_id, dtype=object)
        else:
            feats = _routing_features(tau, sequence, backbone,
                                      router_obj.extractor_tag, first_expert,
                                      feature_cache)
            routed = np.array(router_obj.identify_features(feats), dtype=object)
        preds = np.empty(n, dtype=np.int64)
        for dataset_id in sorted(set(routed.tolist())):
            expert = experts.get(dataset_id)
            if expert is None:
                raise ContractError(f"routed to unknown expert {dataset_id!r}")
            mask = routed == dataset_id
            pred_feats = _prediction_features(tau, dataset_id, sequence,
                                              backbone, experts, feature_cache)
            class_ids, _ = predict_batch(expert, pred_feats[mask])
            preds[mask] = class_ids
        correct = int((preds == labels).sum())
        matrix.record(t, tau, correct, n)
        row_correct[tau] = correct
        hits += int((routed == update.dataset_id).sum())
        total += n
    return hits / total, row_correct


def _fit_snapped_prototypes(update, backbone, k, seed, extractor_tag,
                            first_expert) -> routing.PrototypeSet:
    feats = routing.extract_features(update.train.images, backbone,
                                     extractor_tag, first_expert)
    centroids = routing.kmeans(feats, k, seed)
    # snapped so the single-precision checkpoint replays routing exactly
    centroids = centroids.astype(np.float32).astype(np.float64)
    return routing.PrototypeSet(dataset_id=update.dataset_id,
                                centroids=centroids,
                                extractor_tag=extractor_tag)


# ------------------------------------------------------------------ methods


def run_continual(cfg: RunConfig, repeat: int = 0, *, backbone=None,
                  sequence=None, pool_accuracy: float = float("nan"),
                  expert_cache: dict | None = None):
    """Expert-per-dataset methods (color, colorpp, oracle).

    Returns (RunRecord, RunState). The oracle method and the til
    scenario both evaluate with the true dataset id; color/colorpp
    infer it from prototypes.
    """
    if cfg.method not in ("color", "colorpp", "oracle"):
        raise ContractError(f"run_continual cannot execute method {cfg.method!r}")
    backbone, pool_accuracy = _resolve_backbone(cfg, backbone, pool_accuracy)
    sequence = sequence or build_sequence(cfg)
    if not backbone.frozen:
        raise ContractError("backbone must arrive frozen; pretrain first")

    init_seed = cfg.init_seed + repeat
    kmeans_seed = cfg.kmeans_seed + repeat
    extractor_tag = (routing.EXTRACTOR_FIRST_EXPERT if cfg.method == "colorpp"
                     else routing.EXTRACTOR_FROZEN)
    oracle_routing = cfg.method == "oracle" or cfg.scenario == "til"
    router_obj = None if oracle_routing else routing.Router(extractor_tag)

    experts: dict = {}
    order: list = []
    matrix = AccuracyMatrix()
    rows = []
    feature_cache: dict = {}
    token = _backbone_key(cfg)
    for t, update in enumerate(sequence.updates, start=1):
        started = time.perf_counter()
        with _Phase(t, "expert training"):
            expert = _train_update_expert(
                backbone, update, cfg.train_config(seed=init_seed * 10_000 + t),
                expert_cache, token)
        experts[update.dataset_id] = expert
        order.append(update.dataset_id)
        first_expert = experts[order[0]]
        if not oracle_routing:
            with _Phase(t, "prototype fitting"):
                router_obj.add(_fit_snapped_prototypes(
                    update, backbone, cfg.resolved_clusters(),
                    kmeans_seed * 10_000 + t, extractor_tag, first_expert))
        with _Phase(t, "evaluation"):
            routing_acc, row_correct = _evaluate_round(
                t, sequence, backbone, experts, router_obj, oracle_routing,
                first_expert, feature_cache, matrix)
        rows.append(UpdateRow(
            update_index=t,
            avg_acc=average_accuracy(matrix, t),
            forgetting=forgetting(matrix, t) if t >= 2 else None,
            routing_acc=routing_acc,
            wall_ms=(time.perf_counter() - started) * 1e3))

    params = lora.count_trainable_params(
        cfg.model_config(), cfg.rank, len(sequence.updates[0].label_map))
    record = RunRecord(run_id=run_identifier(cfg, repeat), config=cfg,
                       repeat=repeat, seed=init_seed, rows=rows,
                       params_trainable=params, pool_accuracy=pool_accuracy)
    metrics = _final_metrics(record, row_correct)
    state = RunState(config=cfg, backbone=backbone, experts_by_id=experts,
                     dataset_order=order, router=router_obj, metrics=metrics)
    return record, state


def _final_metrics(record: RunRecord, final_row_correct: dict) -> dict:
    return {
        "final_avg_acc": record.final_avg_acc,
        "final_forgetting": record.final_forgetting,
        "final_routing_acc": record.final_routing_acc,
        "final_row_correct": {str(tau): c for tau, c in final_row_correct.items()},
    }


def _resolve_backbone(cfg, backbone, pool_accuracy):
    if backbone is None:
        outcome = prepare_backbone(cfg)
        return outcome.params, outcome.pool_accuracy
    return backbone, pool_accuracy


# FT-seq baseline -------------------------------------------------------------


def _thawed_copy(backbone: vit.ViTParams) -> vit.ViTParams:
    def dup(t):
        return T.Tensor(t.data.copy(), requires_grad=True)

    layers = [vit.LayerParams(**{name.split(".", 1)[1]: dup(tensor)
                                 for name, tensor in layer.named("x")})
              for layer in backbone.layers]
    return vit.ViTParams(config=backbone.config,
                         patch_embed=dup(backbone.patch_embed),
                         pos_embed=dup(backbone.pos_embed),
                         cls_token=dup(backbone.cls_token),
                         layers=layers, frozen=False)


def run_ftseq_baseline(cfg: RunConfig, repeat: int = 0, *, backbone=None,
                       sequence=None, pool_accuracy: float = float("nan"),
                       expert_cache: dict | None = None):
    """Sequential full fine-tuning of one shared model with class masking.

    A single head covers the union of all classes; during each update the
    logits of classes absent from that update are set to -inf, so their
    probabilities and gradients are exactly zero. Evaluation is unmasked.
    """
    if cfg.method != "ftseq":
        raise ContractError(f"run_ftseq_baseline cannot execute {cfg.method!r}")
    backbone, pool_accuracy = _resolve_backbone(cfg, backbone, pool_accuracy)
    sequence = sequence or build_sequence(cfg)

    init_seed = cfg.init_seed + repeat
    model = _thawed_copy(backbone)
    mcfg = model.config
    label_map = tuple(sorted({c for u in sequence.updates for c in u.label_map}))
    index_of = {c: i for i, c in enumerate(label_map)}
    head_rng = np.random.default_rng([init_seed, 7])
    w = T.Tensor(T.truncated_normal(head_rng, (mcfg.embed_dim, len(label_map))),
                 requires_grad=True)
    b = T.zeros((len(label_map),), requires_grad=True)
    trainables = list(model.named_tensors()) + [("head.w", w), ("head.b", b)]

    matrix = AccuracyMatrix()
    rows = []
    for t, update in enumerate(sequence.updates, start=1):
        started = time.perf_counter()
        with _Phase(t, "sequential fine-tuning"):
            _finetune_one_update(model, trainables, w, b, update, index_of,
                                 cfg, init_seed, t)
        with _Phase(t, "evaluation"):
            row_correct = _evaluate_shared_model(t, sequence, model, w, b,
                                                 label_map, matrix)
        rows.append(UpdateRow(
            update_index=t,
            avg_acc=average_accuracy(matrix, t),
            forgetting=forgetting(matrix, t) if t >= 2 else None,
            routing_acc=None,
            wall_ms=(time.perf_counter() - started) * 1e3))

    params = (sum(tensor.data.size for _, tensor in model.named_tensors())
              + w.data.size + b.data.size)
    record = RunRecord(run_id=run_identifier(cfg, repeat), config=cfg,
                       repeat=repeat, seed=init_seed, rows=rows,
                       params_trainable=int(params), pool_accuracy=pool_accuracy)
    state = RunState(config=cfg, backbone=backbone, experts_by_id={},
                     dataset_order=[u.dataset_id for u in sequence.updates],
                     router=None, metrics=_final_metrics(record, row_correct))
    return record, state


def _finetune_one_update(model, trainables, w, b, update, index_of, cfg,
                         init_seed, t):
    images = update.train.images
    local = np.array([index_of[int(c)] for c in update.train.labels])
    n = len(images)
    patches = vit.patchify(images, model.config)
    mask_row = np.full(len(index_of), -np.inf)
    for c in update.label_map:
        mask_row[index_of[int(c)]] = 0.0
    mask = T.Tensor(mask_row, requires_grad=False)

    tcfg = cfg.train_config(seed=init_seed)
    steps_per_epoch = -(-n // cfg.batch_size)
    optimizer = AdamW(trainables, tcfg, cfg.epochs * steps_per_epoch)
    shuffle_rng = np.random.default_rng([init_seed, 8, t])
    step = 0
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            feats = vit.forward_batch(None, model, patches=patches[idx])
            logits = T.add(T.add(T.matmul(feats, w), b), mask)
            loss = T.cross_entropy(logits, local[idx])
            T.backward(loss)
            optimizer.step(step)
            step += 1


def _evaluate_shared_model(t, sequence, model, w, b, label_map, matrix):
    classes = np.asarray(label_map)
    row_correct = {}
    for tau in range(1, t + 1):
        update = sequence.updates[tau - 1]
        feats = vit.embed_images(update.test.images, model)
        logits = feats @ w.data + b.data
        preds = classes[logits.argmax(axis=1)]
        correct = int((preds == np.asarray(update.test.labels)).sum())
        matrix.record(t, tau, correct, len(update.test.labels))
        row_correct[tau] = correct
    return row_correct


# joint upper bound -----------------------------------------------------------


def run_joint_upper_bound(cfg: RunConfig, repeat: int = 0, *, backbone=None,
                          sequence=None, pool_accuracy: float = float("nan"),
                          expert_cache: dict | None = None):
    """One adapter expert trained on the union of every update's data.

    No prototypes are built; all test sets are scored by the single
    expert. The record carries one row at the final update index, with
    forgetting and routing marked absent.
    """
    if cfg.method != "joint":
        raise ContractError(f"run_joint_upper_bound cannot execute {cfg.method!r}")
    backbone, pool_accuracy = _resolve_backbone(cfg, backbone, pool_accuracy)
    sequence = sequence or build_sequence(cfg)
    if not backbone.frozen:
        raise ContractError("backbone must arrive frozen; pretrain first")

    init_seed = cfg.init_seed + repeat
    started = time.perf_counter()
    images = np.concatenate([u.train.images for u in sequence.updates])
    labels = np.concatenate([u.train.labels for u in sequence.updates])
    label_map = tuple(sorted({c for u in sequence.updates for c in u.label_map}))
    union = scenarios.Update(dataset_id="joint_union",
                             train=scenarios.LabeledSet(images, labels),
                             test=sequence.updates[0].test,
                             label_map=label_map)
    # seeded like update 1 so a single-update sequence reproduces the
    # expert-per-dataset methods exactly
    with _Phase(1, "joint training"):
        expert = _train_update_expert(
            backbone, union, cfg.train_config(seed=init_seed * 10_000 + 1),
            expert_cache, _backbone_key(cfg))

    big_t = len(sequence.updates)
    matrix = AccuracyMatrix()
    row_correct = {}
    with _Phase(big_t, "evaluation"):
        for tau in range(1, big_t + 1):
            update = sequence.updates[tau - 1]
            feats = vit.embed_images(update.test.images, backbone,
                                     adapters=expert.adapter_set)
            class_ids, _ = predict_batch(expert, feats)
            correct = int((class_ids == np.asarray(update.test.labels)).sum())
            matrix.record(big_t, tau, correct, len(update.test.labels))
            row_correct[tau] = correct
    rows = [UpdateRow(update_index=big_t,
                      avg_acc=average_accuracy(matrix, big_t),
                      forgetting=None, routing_acc=None,
                      wall_ms=(time.perf_counter() - started) * 1e3)]

    params = lora.count_trainable_params(cfg.model_config(), cfg.rank,
                                         len(label_map))
    record = RunRecord(run_id=run_identifier(cfg, repeat), config=cfg,
                       repeat=repeat, seed=init_seed, rows=rows,
                       params_trainable=params, pool_accuracy=pool_accuracy)
    state = RunState(config=cfg, backbone=backbone,
                     experts_by_id={"joint_union": expert},
                     dataset_order=["joint_union"], router=None,
                     metrics=_final_metrics(record, row_correct))
    return record, state


# ---------------------------------------------------------------- execution


_RUNNERS = {"color": run_continual, "colorpp": run_continual,
            "oracle": run_continual, "ftseq": run_ftseq_baseline,
            "joint": run_joint_upper_bound}


def execute_run(cfg: RunConfig, *, expert_cache: dict | None = None,
                state_sink=None) -> list:
    """All repeats of one configuration; returns one RunRecord each.

    state_sink, when given, receives (repeat, RunState) after each
    repeat finishes (the CLI points it at checkpoint files).
    """
    outcome = prepare_backbone(cfg)
    sequence = build_sequence(cfg)
    runner = _RUNNERS[cfg.method]
    records = []
    for repeat in range(cfg.repeats):
        record, state = runner(cfg, repeat, backbone=outcome.params,
                               sequence=sequence,
                               pool_accuracy=outcome.pool_accuracy,
                               expert_cache=expert_cache)
        records.append(record)
        if state_sink is not None:
            state_sink(repeat, state)
    return records


def sweep(cfg: RunConfig, axis: str, values, *,
          expert_cache: dict | None = None, on_records=None) -> list:
    """One full run per value of `axis` (rank or clusters), seeds fixed.

    on_records, when given, is called with each completed value's record
    list so callers can persist partial results; an error inside a run
    propagates after the callback has seen every earlier value.
    """
    if axis not in ("rank", "clusters"):
        raise ConfigError(f"sweep axis must be rank or clusters, got {axis!r}")
    try:
        values = [int(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep values must be integers: {exc}") from exc
    if not values:
        raise ConfigError("sweep needs at least one value")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"sweep values must be strictly increasing: {values}")
    all_records = []
    for value in values:
        sub = replace(cfg, **{axis: value})
        records = execute_run(sub, expert_cache=expert_cache)
        all_records.extend(records)
        if on_records is not None:
            on_records(value, records)
    return all_records


def summarize(records) -> dict:
    """Mean and spread of final metrics over a record group.

    Standard deviations are sample deviations and appear only when the
    group holds at least two records.
    """
    if not records:
        raise ContractError("summarize needs at least one record")

    def stats(values):
        values = [v for v in values if v is not None]
        if not values:
            return {"mean": None, "std": None}
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
        return {"mean": mean, "std": std}

    return {
        "n": len(records),
        "avg_acc": stats([r.final_avg_acc for r in records]),
        "forgetting": stats([r.final_forgetting for r in records]),
        "routing_acc": stats([r.final_routing_acc for r in records]),
    }


# ------------------------------------------------------------------- output


def _fmt(value) -> str:
    if value is None:
        return "N/A"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def record_rows(record: RunRecord) -> list:
    """Flatten one record into CSV row dicts (schema CSV_COLUMNS)."""
    cfg = record.config
    out = []
    for row in record.rows:
        out.append({
            "run_id": record.run_id,
            "method": cfg.method,
            "scenario": cfg.scenario,
            "update_index": str(row.update_index),
            "rank": str(cfg.rank),
            "clusters": str(cfg.resolved_clusters()),
            "seed": str(record.seed),
            "avg_acc": _fmt(row.avg_acc),
            "forgetting": _fmt(row.forgetting),
            "routing_acc": _fmt(row.routing_acc),
            "params_trainable": str(record.params_trainable),
            # wall-clock lives in the run log; the CSV stays byte-reproducible
            "wall_ms": "N/A",
        })
    return out


def write_results_csv(records, path) -> str:
    rows = []
    for record in records:
        rows.extend(record_rows(record))
    return write_rows_csv(rows, path)


def write_rows_csv(rows, path) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(row[c] for c in CSV_COLUMNS))
    text = "\n".join(lines) + "\n"
    try:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise StorageError(f"cannot write results to {path}: {exc}") from exc
    return str(path)


_REFERENCE_DIMS = ("vit-b/16 (L=12, d=768)", 12, 768)


def parameter_table(rows) -> str:
    """Trainable-parameter accounting per configuration.

    The first line is the fixed full-scale reference: adapters at rank 1
    plus a 2-class head on a 12-layer, 768-wide encoder.
    """
    ref_name, ref_layers, ref_dim = _REFERENCE_DIMS
    ref = vit.ModelConfig(image_size=224, patch_size=16, embed_dim=ref_dim,
                          num_layers=ref_layers, num_heads=12,
                          ffn_hidden_dim=4 * ref_dim)
    entries = [(ref_name, 1, 2, lora.count_trainable_params(ref, 1, 2))]
    seen = set()
    for row in rows:
        key = (row["method"], row["scenario"], row["rank"],
               row["params_trainable"])
        if key in seen:
            continue
        seen.add(key)
        entries.append((f"{row['method']} {row['scenario']}", row["rank"],
                        "-", int(row["params_trainable"])))
    lines = [f"{'configuration':<28} {'rank':>6} {'classes':>8} {'trainable':>12}"]
    for name, rank, classes, count in entries:
        lines.append(f"{name:<28} {rank:>6} {classes:>8} {count:>12,}")
    return "\n".join(lines) + "\n"


def report(records, out_dir) -> dict:
    """Emit results.csv and the parameter table; returns paths and text."""
    if not records:
        raise ContractError("report needs at least one record")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for record in records:
        rows.extend(record_rows(record))
    return report_rows(rows, out_dir)


def report_rows(rows, out_dir) -> dict:
    if not rows:
        raise ContractError("report needs at least one result row")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = write_rows_csv(rows, os.path.join(out_dir, "results.csv"))
    table = parameter_table(rows)
    table_path = os.path.join(out_dir, "param_table.txt")
    try:
        with open(table_path, "w", encoding="ascii") as fh:
            fh.write(table)
    except OSError as exc:
        raise StorageError(f"cannot write {table_path}: {exc}") from exc
    return {"results_csv": csv_path, "param_table": table_path, "table": table}


def read_rows_csv(path) -> list:
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = [line.rstrip("\n") for line in fh if line.strip()]
    except OSError as exc:
        raise StorageError(f"cannot read results from {path}: {exc}") from exc
    if not lines or tuple(lines[0].split(",")) != CSV_COLUMNS:
        raise DataError(f"{path} does not start with the results header")
    return [dict(zip(CSV_COLUMNS, line.split(","))) for line in lines[1:]]


# -------------------------------------------------------------- state files


def save_run_state(state: RunState, path) -> str:
    """Serialize backbone, experts and prototypes into one checkpoint."""
    tensors = []
    for name, tensor in state.backbone.named_tensors():
        tensors.append((f"backbone.{name}", tensor.data))
    label_maps = {}
    for dataset_id in state.dataset_order:
        expert = state.experts_by_id[dataset_id]
        label_maps[dataset_id] = list(expert.head.label_map)
        for name, tensor in expert.named_tensors():
            tensors.append((f"experts.{dataset_id}.{name}", tensor.data))
    if state.router is not None:
        tensors.extend(state.router.named_arrays())
    metadata = {
        "kind": "run_state",
        "config": asdict(state.config),
        "dataset_order": list(state.dataset_order),
        "label_maps": label_maps,
        "extractor": None if state.router is None else state.router.extractor_tag,
        "metrics": state.metrics,
    }
    ckpt.save_checkpoint(tensors, path, metadata=metadata)
    return str(path)


def _backbone_from_arrays(model_config, arrays, prefix="backbone."):
    params = vit.init_params(model_config, seed=0)
    for name, tensor in params.named_tensors():
        stored = arrays.get(prefix + name)
        if stored is None:
            raise DataError(f"checkpoint is missing tensor {prefix + name!r}")
        if stored.shape != tensor.data.shape:
            raise DataError(
                f"tensor {prefix + name!r} has shape {stored.shape}, "
                f"model needs {tensor.data.shape}")
        tensor.data = stored
    params.freeze()
    return params


def _expert_from_arrays(dataset_id, label_map, model_config, rank, arrays):
    adapters = lora.new_adapter_set(model_config, rank=rank, seed=0,
                                    dataset_id=dataset_id)
    prefix = f"experts.{dataset_id}."
    for name, tensor in adapters.named_tensors():
        stored = arrays.get(prefix + name)
        if stored is None:
            raise DataError(f"checkpoint is missing tensor {prefix + name!r}")
        tensor.data = stored
    w = arrays.get(prefix + "head.w")
    b = arrays.get(prefix + "head.b")
    if w is None or b is None:
        raise DataError(f"checkpoint is missing the head of {dataset_id!r}")
    head = ClassifierHead(w=T.Tensor(w), b=T.Tensor(b),
                          label_map=tuple(label_map))
    expert = Expert(dataset_id=dataset_id, adapter_set=adapters, head=head)
    expert.finalize()
    return expert


def load_run_state(path) -> RunState:
    arrays, metadata = ckpt.load_checkpoint(path)
    if metadata.get("kind") != "run_state":
        raise DataError(f"{path} is not a run-state checkpoint")
    cfg = config_from_mapping(metadata["config"])
    model_config = cfg.model_config()
    backbone = _backbone_from_arrays(model_config, arrays)
    experts = {}
    for dataset_id in metadata["dataset_order"]:
        experts[dataset_id] = _expert_from_arrays(
            dataset_id, metadata["label_maps"][dataset_id], model_config,
            cfg.rank, arrays)
    router_obj = None
    if metadata["extractor"] is not None:
        router_obj = routing.Router(metadata["extractor"])
        for dataset_id in metadata["dataset_order"]:
            centroids = arrays.get(f"router.{dataset_id}.centroids")
            if centroids is None:
                raise DataError(
                    f"checkpoint is missing prototypes for {dataset_id!r}")
            router_obj.add(routing.PrototypeSet(
                dataset_id=dataset_id, centroids=centroids,
                extractor_tag=metadata["extractor"]))
    return RunState(config=cfg, backbone=backbone, experts_by_id=experts,
                    dataset_order=list(metadata["dataset_order"]),
                    router=router_obj, metrics=metadata["metrics"])


def replay_evaluation(state: RunState) -> dict:
    """Re-run the final evaluation round from a (loaded) state.

    Regenerates the test data from the stored config and scores it with
    the stored experts and prototypes; matches the metrics recorded at
    save time bit for bit.
    """
    cfg = state.config
    if cfg.method in ("ftseq", "joint"):
        raise ContractError(f"replay covers expert-per-dataset methods, "
                            f"not {cfg.method!r}")
    sequence = build_sequence(cfg)
    big_t = len(sequence.updates)
    oracle_routing = cfg.method == "oracle" or cfg.scenario == "til"
    first_expert = state.experts_by_id[state.dataset_order[0]]
    matrix = AccuracyMatrix()
    routing_acc, row_correct = _evaluate_round(
        big_t, sequence, state.backbone, state.experts_by_id, state.router,
        oracle_routing, first_expert, {}, matrix)
    return {
        "final_avg_acc": average_accuracy(matrix, big_t),
        "final_routing_acc": routing_acc,
        "final_row_correct": {str(tau): c for tau, c in row_correct.items()},
    }


# ------------------------------------------------------------ data export


def export_dataset(sequence: scenarios.DatasetSequence, out_dir) -> str:
    """Write each update as an .npz plus one manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    try:
        for update in sequence.updates:
            file_name = f"{update.dataset_id}.npz"
            np.savez_compressed(
                os.path.join(out_dir, file_name),
                train_images=update.train.images,
                train_labels=update.train.labels,
                test_images=update.test.images,
                test_labels=update.test.labels)
            entries.append({
                "dataset_id": update.dataset_id,
                "domain": update.domain,
                "label_map": list(update.label_map),
                "file": file_name,
                "train_size": len(update.train),
                "test_size": len(update.test),
            })
        manifest = {"scenario": sequence.scenario, "updates": entries}
        manifest_path = os.path.join(out_dir, "manifest.json")
        with open(manifest_path, "w", encoding="ascii") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot export dataset to {out_dir}: {exc}") from exc
    return manifest_path
