"""Small vision transformer backbone.

Pipeline: patchify -> linear patch embedding + [CLS] token + learned
position embeddings -> L pre-norm blocks of multi-head self-attention
and a two-layer GeLU feed-forward (both with residual connections) ->
the final [CLS] row as the image representation.

Attention scores are scaled by 1/sqrt(head_dim). Low-rank adapters, when
supplied, shift the query and value projections by their deltas without
touching the stored base weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import AdapterError, ShapeError
from .tensor import Tensor

__all__ = [
    "LayerParams",
    "ModelConfig",
    "ViTParams",
    "attention_block",
    "attention_weights",
    "embed_patches",
    "ffn_block",
    "forward",
    "forward_batch",
    "init_params",
    "patchify",
]


@dataclass(frozen=True)
class ModelConfig:
    """Shape hyperparameters of the backbone."""

    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_hidden_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError(
                f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                     "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class ViTParams:
    """Backbone parameters; frozen ones never receive gradient updates."""

    config: ModelConfig
    patch_embed: Tensor
    pos_embed: Tensor
    cls_token: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    frozen: bool = False

    def named_tensors(self):
        yield "patch_embed", self.patch_embed
        yield "pos_embed", self.pos_embed
        yield "cls_token", self.cls_token
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layer{i}")

    def freeze(self):
        """Mark read-only; values are snapped to float32 so that the
        single-precision checkpoint format round-trips them exactly."""
        self.frozen = True
        for _, t in self.named_tensors():
            t.data = t.data.astype(np.float32).astype(np.float64)
            t.requires_grad = False
        return self

    def set_trainable(self):
        self.frozen = False
        for _, t in self.named_tensors():
            t.requires_grad = True
        return self


def init_params(config: ModelConfig, seed: int, trainable: bool = False) -> ViTParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def w(shape):
        return Tensor(T.truncated_normal(rng, shape), requires_grad=trainable)

    def z(shape):
        return Tensor(np.zeros(shape), requires_grad=trainable)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=trainable)

    layers = [
        LayerParams(
            wq=w((d, d)), wk=w((d, d)), wv=w((d, d)), wo=w((d, d)),
            w1=w((d, config.ffn_hidden_dim)), b1=z(config.ffn_hidden_dim),
            w2=w((config.ffn_hidden_dim, d)), b2=z(d),
            ln1_gain=ones(d), ln1_bias=z(d), ln2_gain=ones(d), ln2_bias=z(d),
        )
        for _ in range(config.num_layers)
    ]
    return ViTParams(
        config=config,
        patch_embed=w((config.patch_dim, d)),
        pos_embed=w((config.num_tokens, d)),
        cls_token=w((1, d)),
        layers=layers,
        frozen=False,
    )


def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(B, W, H, C) images -> (B, num_patches, P*P*C) rows.

    Patches enumerate the grid row-major; each patch flattens row-major
    over (y, x, channel).
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, w, h, c = images.shape
    if (w, h, c) != (config.image_size, config.image_size, config.channels):
        raise ShapeError(
            f"image shape {(w, h, c)} does not match configured "
            f"{(config.image_size, config.image_size, config.channels)}"
        )
    p = config.patch_size
    g = w // p
    x = images.reshape(b, g, p, g, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * c)
    return x[0] if single else x


def _adapted(base: Tensor, adapters, layer_index: int, target: str) -> Tensor:
    if adapters is None:
        return base
    adapter = adapters.get(layer_index, target)
    if adapter.b.shape[0] != base.shape[0] or adapter.a.shape[1] != base.shape[1]:
        raise AdapterError(
            f"adapter for layer {layer_index} target {target} has delta shape "
            f"{(adapter.b.shape[0], adapter.a.shape[1])}, weight is {base.shape}"
        )
    return T.add(base, T.matmul(adapter.b, adapter.a))


def embed_patches(image, params: ViTParams) -> Tensor:
    """Single image (W, H, C) -> token matrix (N, D), [CLS] in row 0."""
    return T.reshape(
        _embed_batch(patchify(image, params.config)[None], params),
        (params.config.num_tokens, params.config.embed_dim),
    )


def _embed_batch(patches: np.ndarray, params: ViTParams) -> Tensor:
    b = patches.shape[0]
    cfg = params.config
    tok = T.matmul(T.constant(patches), params.patch_embed)
    cls = T.broadcast_to(T.reshape(params.cls_token, (1, 1, cfg.embed_dim)),
                         (b, 1, cfg.embed_dim))
    x0 = T.concat([cls, tok], axis=1)
    return T.add(x0, params.pos_embed)


def _split_heads(x: Tensor, b: int, n: int, config: ModelConfig) -> Tensor:
    x = T.reshape(x, (b, n, config.num_heads, config.head_dim))
    return T.transpose(x, (0, 2, 1, 3))


def _mhsa(xn: Tensor, layer: LayerParams, adapters, layer_index: int,
          config: ModelConfig, collect_attn=None) -> Tensor:
    b, n, d = xn.shape
    q = T.matmul(xn, _adapted(layer.wq, adapters, layer_index, "query"))
    k = T.matmul(xn, layer.wk)
    v = T.matmul(xn, _adapted(layer.wv, adapters, layer_index, "value"))
    qh = _split_heads(q, b, n, config)
    kh = _split_heads(k, b, n, config)
    vh = _split_heads(v, b, n, config)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))),
                   T.constant(1.0 / np.sqrt(config.head_dim)))
    attn = T.softmax(scores, axis=-1)
    if collect_attn is not None:
        collect_attn.append(attn.data.copy())
    ctx = T.matmul(attn, vh)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return T.matmul(merged, layer.wo)


def attention_block(x: Tensor, layer: LayerParams, config: ModelConfig,
                    adapters=None, layer_index: int = 1) -> Tensor:
    """Pre-norm multi-head self-attention with residual connection."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    xn = T.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
    out = T.add(x, _mhsa(xn, layer, adapters, layer_index, config))
    return T.reshape(out, out.shape[1:]) if single else out


def ffn_block(x: Tensor, layer: LayerParams) -> Tensor:
    """Residual feed-forward: x + GeLU(GeLU(LN(x) W1 + b1) W2 + b2)."""
    xn = T.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
    hidden = T.gelu(T.add(T.matmul(xn, layer.w1), layer.b1))
    return T.add(x, T.gelu(T.add(T.matmul(hidden, layer.w2), layer.b2)))


def attention_weights(x: Tensor, layer: LayerParams, config: ModelConfig,
                      adapters=None, layer_index: int = 1) -> np.ndarray:
    """Attention matrices of one block, shape (B, heads, N, N)."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    xn = T.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
    collected = []
    with T.no_grad():
        _mhsa(xn, layer, adapters, layer_index, config, collect_attn=collected)
    return collected[0][0] if single else collected[0]


def _run_blocks(x: Tensor, params: ViTParams, adapters) -> Tensor:
    for i, layer in enumerate(params.layers):
        x = T.add(x, _mhsa(T.layer_norm(x, layer.ln1_gain, layer.ln1_bias),
                           layer, adapters, i + 1, params.config))
        x = ffn_block(x, layer)
    return x


def forward_batch(images, params: ViTParams, adapters=None,
                  patches: np.ndarray | None = None) -> Tensor:
    """(B, W, H, C) images -> (B, D) [CLS] representations.

    Pass pre-computed `patches` to skip patchify on hot paths.
    """
    if adapters is not None:
        adapters.check_model(params.config)
    if patches is None:
        patches = patchify(images, params.config)
    x = _embed_batch(patches, params)
    x = _run_blocks(x, params, adapters)
    cls = T.slice_axis(x, 1, 0, 1)
    return T.reshape(cls, (patches.shape[0], params.config.embed_dim))


def forward(image, params: ViTParams, adapters=None) -> Tensor:
    """Single image -> (D,) [CLS] representation."""
    out = forward_batch(np.asarray(image)[None], params, adapters)
    return T.reshape(out, (params.config.embed_dim,))


def embed_images(images, params: ViTParams, adapters=None,
                 batch_size: int = 256) -> np.ndarray:
    """(N, W, H, C) images -> (N, D) representations, no gradient recording."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    chunks = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = forward_batch(images[start:start + batch_size], params, adapters)
            chunks.append(chunk.data)
    return np.concatenate(chunks, axis=0)
