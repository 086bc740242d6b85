"""Per-dataset experts: low-rank adapters plus a linear head on a frozen backbone.

Training touches only the adapter factors and the head; every backbone tensor
stays bitwise unchanged. A finished expert is immutable, so its accuracy on
its own dataset cannot degrade as later experts arrive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lora
from . import tensor as T
from . import vit
from .errors import ContractError, DataError, NumericError, ShapeError

__all__ = [
    "ClassifierHead",
    "Expert",
    "TrainConfig",
    "AdamW",
    "cosine_multiplier",
    "train_expert",
    "predict_batch",
    "predict_with_expert",
]


@dataclass
class ClassifierHead:
    """Linear readout w (D, C), b (C,) over global class ids label_map."""

    w: T.Tensor
    b: T.Tensor
    label_map: tuple

    def __post_init__(self):
        self.label_map = tuple(int(c) for c in self.label_map)
        if len(set(self.label_map)) != len(self.label_map):
            raise ContractError(f"label_map has repeated entries: {self.label_map}")
        c = len(self.label_map)
        if self.w.ndim != 2 or self.w.shape[1] != c or self.b.shape != (c,):
            raise ShapeError(
                f"head shapes {self.w.shape}/{self.b.shape} do not fit "
                f"{c} classes")

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def named_tensors(self):
        return [("head.w", self.w), ("head.b", self.b)]


@dataclass
class Expert:
    dataset_id: str
    adapter_set: lora.AdapterSet
    head: ClassifierHead
    training_log: list = field(default_factory=list)
    trained: bool = False

    def __post_init__(self):
        if self.adapter_set.dataset_id != self.dataset_id:
            raise ContractError(
                f"adapter set belongs to {self.adapter_set.dataset_id!r}, "
                f"expert to {self.dataset_id!r}")

    def named_tensors(self):
        return list(self.adapter_set.named_tensors()) + self.head.named_tensors()

    def finalize(self):
        """Snap all tensors to single-precision values and lock them."""
        for _, t in self.named_tensors():
            t.data = t.data.astype(np.float32).astype(np.float64)
            t.requires_grad = False
            t.grad = None
        self.trained = True


@dataclass(frozen=True)
class TrainConfig:
    """Expert optimization settings.

    Defaults are the desk-scale ones; at full scale rank 64 is the
    documented default. The schedule is always cosine annealing from
    learning_rate down to zero over the whole run.
    """

    batch_size: int = 128
    weight_decay: float = 2e-4
    epochs: int = 50
    learning_rate: float = 1e-3
    rank: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "epochs", "rank"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ContractError("learning_rate must be > 0 and weight_decay >= 0")


def cosine_multiplier(step_index: int, total_steps: int) -> float:
    """Schedule factor: exactly 1 at the first step, 0 at the last."""
    if total_steps < 1 or not 0 <= step_index < total_steps:
        raise ContractError(
            f"step {step_index} outside schedule of {total_steps} steps")
    if total_steps == 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step_index / (total_steps - 1)))


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    The learning rate at step i is cfg.learning_rate * cosine_multiplier(i).
    Weight decay is applied directly to the parameter, not through the
    gradient moments.
    """

    def __init__(self, params, cfg: TrainConfig, total_steps: int):
        self.params = list(params)
        self.cfg = cfg
        self.total_steps = int(total_steps)
        if self.total_steps < 1:
            raise ContractError("optimizer needs at least one step")
        self._m = {name: np.zeros_like(t.data) for name, t in self.params}
        self._v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, step_index: int):
        lr = self.cfg.learning_rate * cosine_multiplier(step_index, self.total_steps)
        t = step_index + 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m, v = self._m[name], self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.cfg.eps)
                                    + self.cfg.weight_decay * p.data)
            p.grad = None


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def train_expert(backbone: vit.ViTParams, images, labels, cfg: TrainConfig, *,
                 label_map=None, dataset_id: str = "dataset") -> Expert:
    """Fit adapters + head for one dataset; the backbone is read-only.

    label_map defaults to the sorted distinct labels of the dataset. Any
    label outside the map is a data error.
    """
    if not backbone.frozen:
        raise ContractError("backbone must be frozen before expert training")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ContractError("cannot train an expert on an empty dataset")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")

    if label_map is None:
        label_map = tuple(sorted({int(c) for c in labels}))
    else:
        label_map = tuple(int(c) for c in label_map)
    index_of = {c: i for i, c in enumerate(label_map)}
    outside = sorted({int(c) for c in labels} - set(label_map))
    if outside:
        raise DataError(f"labels {outside} outside label_map {label_map}")
    local = np.array([index_of[int(c)] for c in labels])

    config = backbone.config
    adapters = lora.new_adapter_set(config, rank=cfg.rank, seed=cfg.seed,
                                    dataset_id=dataset_id)
    for _, a_tensor in adapters.named_tensors():
        a_tensor.requires_grad = True
    head_rng = np.random.default_rng([cfg.seed, 1])
    w = T.Tensor(T.truncated_normal(head_rng, (config.embed_dim, len(label_map))),
                 requires_grad=True)
    b = T.zeros((len(label_map),), requires_grad=True)
    head = ClassifierHead(w=w, b=b, label_map=label_map)
    expert = Expert(dataset_id=dataset_id, adapter_set=adapters, head=head)

    patches = vit.patchify(images, config)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    optimizer = AdamW(expert.named_tensors(), cfg, cfg.epochs * steps_per_epoch)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])

    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        hits = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            feats = vit.forward_batch(None, backbone, adapters=adapters,
                                      patches=patches[idx])
            logits = T.add(T.matmul(feats, w), b)
            loss = T.cross_entropy(logits, local[idx])
            hits += int((logits.data.argmax(axis=1) == local[idx]).sum())
            batch_losses.append(loss.item())
            T.backward(loss)
            optimizer.step(step)
            step += 1
        expert.training_log.append({
            "epoch": epoch,
            "loss": float(np.mean(batch_losses)),
            "accuracy": hits / n,
        })
    expert.finalize()
    return expert


def predict_batch(expert: Expert, features: np.ndarray):
    """(N, D) adapted features -> (global class ids (N,), probabilities (N, C)).

    Argmax returns the first maximal column, so ties go to the lowest
    label_map index.
    """
    if not expert.trained:
        raise ContractError("expert is not trained")
    logits = features @ expert.head.w.data + expert.head.b.data
    probs = _softmax_rows(logits)
    class_ids = np.asarray(expert.head.label_map)[logits.argmax(axis=1)]
    return class_ids, probs


def predict_with_expert(expert: Expert, x, backbone: vit.ViTParams):
    """Single image -> (global class id, probability vector)."""
    feats = vit.embed_images(np.asarray(x), backbone, adapters=expert.adapter_set)
    class_ids, probs = predict_batch(expert, feats)
    return int(class_ids[0]), probs[0]
