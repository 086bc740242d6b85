"""Low-rank adapters: construction, deltas, merging, parameter accounting.

An adapter constrains a weight update to delta = B @ A with A (r x k)
and B (d x r), so rank(delta) <= r and the update costs r(d + k)
parameters instead of d*k. Adapters attach only to the query and value
projections of every attention layer. B starts at zero, so a fresh
adapter set leaves the base model's outputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AdapterError, ContractError, ShapeError
from .tensor import Tensor
from .vit import ModelConfig

TARGETS = ("query", "value")

__all__ = [
    "AdapterSet",
    "LoRAAdapter",
    "TARGETS",
    "count_trainable_params",
    "delta",
    "merge",
    "new_adapter_set",
]


@dataclass
class LoRAAdapter:
    layer_index: int  # 1-based
    target: str
    a: Tensor  # (rank, k)
    b: Tensor  # (d, rank)
    rank: int

    def __post_init__(self):
        if self.target not in TARGETS:
            raise AdapterError(f"unknown adapter target {self.target!r}; expected one of {TARGETS}")
        d, k = self.b.shape[0], self.a.shape[1]
        if self.a.shape != (self.rank, k) or self.b.shape != (d, self.rank):
            raise AdapterError(
                f"adapter factor shapes {self.a.shape} / {self.b.shape} inconsistent with rank {self.rank}"
            )
        if self.rank > min(d, k):
            raise AdapterError(f"rank {self.rank} exceeds min{d, k} of the adapted matrix")


@dataclass
class AdapterSet:
    """All adapters of one dataset expert: {query, value} x layers 1..L."""

    dataset_id: str
    rank: int
    adapters: dict = field(default_factory=dict)  # (layer_index, target) -> LoRAAdapter

    def get(self, layer_index: int, target: str) -> LoRAAdapter:
        try:
            return self.adapters[(layer_index, target)]
        except KeyError:
            raise AdapterError(f"no adapter for layer {layer_index} target {target!r}")

    def check_model(self, config: ModelConfig):
        expected = {(l, t) for l in range(1, config.num_layers + 1) for t in TARGETS}
        if set(self.adapters) != expected:
            raise AdapterError(
                f"adapter set covers {sorted(self.adapters)} but model needs {sorted(expected)}"
            )
        d = config.embed_dim
        for (l, t), ad in self.adapters.items():
            if ad.b.shape[0] != d or ad.a.shape[1] != d:
                raise AdapterError(
                    f"adapter ({l}, {t}) delta shape {(ad.b.shape[0], ad.a.shape[1])} "
                    f"does not match weight shape {(d, d)}"
                )

    def named_tensors(self):
        for (l, t) in sorted(self.adapters):
            ad = self.adapters[(l, t)]
            yield f"adapter.layer{l}.{t}.a", ad.a
            yield f"adapter.layer{l}.{t}.b", ad.b

    def __len__(self):
        return len(self.adapters)


def new_adapter_set(config: ModelConfig, rank: int, seed: int,
                    dataset_id: str = "dataset") -> AdapterSet:
    """A ~ truncated normal (std 0.02), B = 0, so every delta starts at 0."""
    d = config.embed_dim
    if rank < 1 or rank > d:
        raise ContractError(f"rank must be in [1, {d}] for embed dim {d}, got {rank}")
    rng = np.random.default_rng(seed)
    adapters = {}
    for layer in range(1, config.num_layers + 1):
        for target in TARGETS:
            a = Tensor(T.truncated_normal(rng, (rank, d)), requires_grad=True)
            b = Tensor(np.zeros((d, rank)), requires_grad=True)
            adapters[(layer, target)] = LoRAAdapter(layer, target, a, b, rank)
    return AdapterSet(dataset_id=dataset_id, rank=rank, adapters=adapters)


def delta(adapter: LoRAAdapter) -> Tensor:
    """The dense low-rank update B @ A."""
    return T.matmul(adapter.b, adapter.a)


def merge(base: Tensor, adapter: LoRAAdapter) -> Tensor:
    """base + B @ A; inference through merged weights matches on-the-fly
    adapter application (within float tolerance)."""
    d, k = adapter.b.shape[0], adapter.a.shape[1]
    if base.shape != (d, k):
        raise ShapeError(f"cannot merge delta of shape {(d, k)} into base {base.shape}")
    return T.add(base, delta(adapter))


def count_trainable_params(config: ModelConfig, rank: int, num_classes: int) -> int:
    """Adapter scalars 2*L*r*(d+k) plus classifier head d*C + C."""
    d = config.embed_dim
    adapter_scalars = 2 * config.num_layers * rank * (d + d)
    head_scalars = d * num_classes + num_classes
    return adapter_scalars + head_scalars
