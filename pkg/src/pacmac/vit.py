"""Small Vision Transformer encoder with a classifier head.

The encoder maps an image to patch tokens plus a learned class token,
runs them through pre-norm transformer blocks, and reads the classifier
off the final class-token embedding. The forward pass also exposes the
class-token attention over patches (averaged across heads) from a
configurable layer, which drives mask construction downstream.

Inference over immutable parameters is safe concurrently across batches;
training holds exclusive access to the parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidConfigError, ShapeMismatchError


@dataclass(frozen=True)
class ViTConfig:
    """Architectural constants of the encoder and head."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 4
    heads: int = 4
    embed_dim: int = 128
    mlp_ratio: float = 4.0
    num_classes: int = 8
    # Layer whose class-token attention is reported; -1 means final layer.
    attention_layer: int = -1

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels, self.depth,
               self.heads, self.embed_dim, self.num_classes) <= 0:
            raise InvalidConfigError("all ViTConfig extents must be positive")
        if self.image_size % self.patch_size != 0:
            raise InvalidConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise InvalidConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not -self.depth <= self.attention_layer < self.depth:
            raise InvalidConfigError(
                f"attention_layer {self.attention_layer} outside depth {self.depth}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class ViTParams:
    """All learnable weights, keyed by name; may carry decoder weights."""

    config: ViTConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name) -> T.Tensor:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def encoder_names(self):
        return [n for n in self.tensors if not n.startswith("decoder.")]

    @property
    def dtype(self):
        return self.tensors["patch.w"].dtype

    def copy(self) -> "ViTParams":
        out = ViTParams(self.config)
        for name, t in self.tensors.items():
            out.tensors[name] = T.parameter(t.values.copy())
        return out


@dataclass
class ForwardResult:
    """Batched outputs of one encoder+head pass."""

    logits: T.Tensor          # (B, C), differentiable w.r.t. params
    probs: np.ndarray         # (B, C), rows sum to 1
    cls_embedding: np.ndarray  # (B, D), final-layer class token after norm
    attention: np.ndarray     # (B, N), class-token attention over patches

    def __len__(self):
        return self.probs.shape[0]

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.values.argmax(axis=-1)

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=-1)


def _trunc_normal(rng, shape, std):
    """Normal(0, std) with redraws outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: ViTConfig, seed: int, dtype=np.float64) -> ViTParams:
    """Deterministic weight initialization for a given seed.

    Weight matrices, the class token, and positional encodings come from a
    truncated normal (std 0.02); layer-norm gains are 1 and biases 0.
    """
    rng = np.random.default_rng(seed)
    d, c = config.embed_dim, config.num_classes
    p = ViTParams(config)

    def w(name, shape):
        p.tensors[name] = T.parameter(_trunc_normal(rng, shape, 0.02), dtype=dtype)

    def zeros(name, shape):
        p.tensors[name] = T.parameter(np.zeros(shape), dtype=dtype)

    def ones(name, shape):
        p.tensors[name] = T.parameter(np.ones(shape), dtype=dtype)

    w("patch.w", (config.patch_dim, d))
    zeros("patch.b", (d,))
    w("cls", (d,))
    w("pos", (config.num_tokens, d))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        ones(pre + "ln1.g", (d,))
        zeros(pre + "ln1.b", (d,))
        for proj in ("q", "k", "v", "o"):
            w(pre + f"attn.w{proj}", (d, d))
            zeros(pre + f"attn.b{proj}", (d,))
        ones(pre + "ln2.g", (d,))
        zeros(pre + "ln2.b", (d,))
        w(pre + "mlp.w1", (d, config.mlp_dim))
        zeros(pre + "mlp.b1", (config.mlp_dim,))
        w(pre + "mlp.w2", (config.mlp_dim, d))
        zeros(pre + "mlp.b2", (d,))
    ones("norm.g", (d,))
    zeros("norm.b", (d,))
    w("head.w", (d, c))
    zeros("head.b", (c,))
    return p


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, patch_size**2 * C), row-major patch order."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def unpatchify(patches: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Inverse of :func:`patchify` for this configuration."""
    b = patches.shape[0]
    g, ps, c = config.grid, config.patch_size, config.channels
    x = patches.reshape(b, g, g, c, ps, ps)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, g * ps, g * ps)


def _check_images(config: ViTConfig, images) -> np.ndarray:
    arr = images.values if isinstance(images, T.Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (config.channels, config.image_size, config.image_size)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeMismatchError(
            f"expected images shaped (B, {expected[0]}, {expected[1]}, {expected[2]}), "
            f"got {arr.shape}")
    return arr


def patch_tokens(params: ViTParams, images) -> np.ndarray:
    """Patch embeddings before the class token and attention layers."""
    config = params.config
    arr = _check_images(config, images)
    with T.no_grad():
        patches = T.constant(patchify(arr, config.patch_size).astype(params.dtype))
        tokens = T.add(T.matmul(patches, params["patch.w"]), params["patch.b"])
    return tokens.values


def forward(params: ViTParams, images) -> ForwardResult:
    """Full encoder+head pass over a batch of images.

    Logits stay differentiable with respect to the parameters whenever
    gradients are enabled; probabilities, embeddings, and attention are
    plain arrays. The attention map is the class-token row of the
    configured layer restricted to patch columns and averaged over heads;
    it is not renormalized after the class-to-class entry is dropped.
    """
    config = params.config
    arr = _check_images(config, images)
    b = arr.shape[0]
    d, heads = config.embed_dim, config.heads
    dh = d // heads
    t = config.num_tokens
    attn_layer = config.attention_layer % config.depth

    patches = T.constant(patchify(arr, config.patch_size).astype(params.dtype))
    x = T.add(T.matmul(patches, params["patch.w"]), params["patch.b"])
    cls_row = T.add(T.constant(np.zeros((b, 1, d), dtype=params.dtype)), params["cls"])
    x = T.concat([cls_row, x], axis=1)
    x = T.add(x, params["pos"])

    attention = None
    for i in range(config.depth):
        pre = f"blocks.{i}."
        h = T.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])

        def heads_view(name):
            proj = T.add(T.matmul(h, params[pre + f"attn.w{name}"]),
                         params[pre + f"attn.b{name}"])
            return T.transpose(T.reshape(proj, (b, t, heads, dh)), (0, 2, 1, 3))

        q, k, v = heads_view("q"), heads_view("k"), heads_view("v")
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        attn = T.softmax_rows(scores)
        if i == attn_layer:
            attention = attn.values[:, :, 0, 1:].mean(axis=1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        x = T.add(x, T.add(T.matmul(ctx, params[pre + "attn.wo"]),
                           params[pre + "attn.bo"]))

        h2 = T.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        hidden = T.gelu(T.add(T.matmul(h2, params[pre + "mlp.w1"]),
                              params[pre + "mlp.b1"]))
        x = T.add(x, T.add(T.matmul(hidden, params[pre + "mlp.w2"]),
                           params[pre + "mlp.b2"]))

    x = T.layer_norm(x, params["norm.g"], params["norm.b"])
    cls = T.reshape(T.slice_axis(x, 1, 0, 1), (b, d))
    logits = T.add(T.matmul(cls, params["head.w"]), params["head.b"])

    with T.no_grad():
        probs = T.softmax_rows(logits.detach()).values
    return ForwardResult(logits=logits, probs=probs,
                         cls_embedding=cls.values.copy(), attention=attention)


def encode_cls(params: ViTParams, images) -> np.ndarray:
    """Final-layer class-token embeddings with no classifier applied."""
    with T.no_grad():
        return forward(params, images).cls_embedding
