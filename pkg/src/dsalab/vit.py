"""A small pre-norm Vision Transformer with a target head and a sensitive head.

The model is a plain dict of named :class:`~dsalab.tensor.Tensor` parameters
plus a :class:`ViTConfig`. :func:`forward` always returns the per-layer
attention maps because the patch attack, the masking baseline and the
alignment regularizer all consume them.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_hw: tuple[int, int] = (32, 32)
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_hidden: int = 128
    head_hidden: int = 64
    num_classes_target: int = 2
    num_classes_sensitive: int = 2
    init_std: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        h, w = self.image_hw
        p = self.patch_size
        if p <= 0 or h % p or w % p:
            raise ValueError(f"image {h}x{w} is not divisible by patch_size {p}")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_hw[0] // self.patch_size, self.image_hw[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


@dataclass
class ViTActivations:
    """Outputs of one batched forward pass.

    ``attn`` holds one tensor per layer of shape (B, heads, n+1, n+1); row
    ``i`` is the attention distribution of query position ``i``.
    """

    attn: list[Tensor]
    features: Tensor
    logits_target: Tensor
    logits_sensitive: Tensor

    @property
    def attention(self) -> np.ndarray:
        """Stacked attention weights, shape (B, L, heads, n+1, n+1)."""
        return np.stack([a.data for a in self.attn], axis=1)


# ---------------------------------------------------------------------------
# patches


def patchify(images, patch_size: int):
    """(B, C, H, W) or (C, H, W) -> (B, n, C*p*p) or (n, C*p*p).

    Patches are numbered row-major over the patch grid; each patch vector is
    the channel-major flattening of its (C, p, p) block. Works on numpy arrays
    and, differentiably, on Tensors.
    """
    single = images.ndim == 3
    if single:
        images = images.reshape((1,) + tuple(images.shape))
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image H={h}, W={w} is not divisible by patch_size={p}")
    gh, gw = h // p, w // p
    x = images.reshape((b, c, gh, p, gw, p))
    x = x.transpose((0, 2, 4, 1, 3, 5))
    x = x.reshape((b, gh * gw, c * p * p))
    return x.reshape((gh * gw, c * p * p)) if single else x


def unpatchify(patches, patch_size: int, channels: int, image_hw: tuple[int, int]):
    single = patches.ndim == 2
    if single:
        patches = patches.reshape((1,) + tuple(patches.shape))
    b = patches.shape[0]
    h, w = image_hw
    p = patch_size
    gh, gw = h // p, w // p
    x = patches.reshape((b, gh, gw, channels, p, p))
    x = x.transpose((0, 3, 1, 4, 2, 5))
    x = x.reshape((b, channels, h, w))
    return x.reshape((channels, h, w)) if single else x


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, f, hh = cfg.embed_dim, cfg.ffn_hidden, cfg.head_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        shapes[pre + "ln1.scale"] = (d,)
        shapes[pre + "ln1.shift"] = (d,)
        for name in "qkvo":
            shapes[pre + f"attn.{name}.weight"] = (d, d)
            shapes[pre + f"attn.{name}.bias"] = (d,)
        shapes[pre + "ln2.scale"] = (d,)
        shapes[pre + "ln2.shift"] = (d,)
        shapes[pre + "ffn.fc1.weight"] = (d, f)
        shapes[pre + "ffn.fc1.bias"] = (f,)
        shapes[pre + "ffn.fc2.weight"] = (f, d)
        shapes[pre + "ffn.fc2.bias"] = (d,)
    shapes["norm.scale"] = (d,)
    shapes["norm.shift"] = (d,)
    for head, classes in (("head_t", cfg.num_classes_target), ("head_s", cfg.num_classes_sensitive)):
        shapes[f"{head}.fc1.weight"] = (d, hh)
        shapes[f"{head}.fc1.bias"] = (hh,)
        shapes[f"{head}.fc2.weight"] = (hh, classes)
        shapes[f"{head}.fc2.bias"] = (classes,)
    return shapes


def num_params(cfg: ViTConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ViTConfig, seed: int) -> dict[str, Tensor]:
    """Truncated-normal weights (std ``cfg.init_std``, cut at 2 std), zero biases, zero class token.

    LayerNorm scales start at one. The common 0.02 std leaves this small
    from-scratch model on a long loss plateau, hence the larger default.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0x56495431]))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".shift")) or name == "cls_token":
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, cfg.init_std)
        params[name] = Tensor(data, requires_grad=True)
    return params


def head_param_names(cfg: ViTConfig, head: str) -> list[str]:
    return [n for n in param_shapes(cfg) if n.startswith(head + ".")]


# ---------------------------------------------------------------------------
# forward


def _affine_norm(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, p[prefix + ".scale"], p[prefix + ".shift"], eps=1e-6)


def _linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return T.linear(x, p[prefix + ".weight"], p[prefix + ".bias"])


def _check_layer(x: Tensor, layer: int) -> None:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"non-finite activations in layer {layer}")


def encode(params: dict[str, Tensor], cfg: ViTConfig, patches) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder on patch vectors (B, n, patch_dim); returns (tokens, attention maps)."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise T.ShapeError(
            f"expected patches (B, {cfg.num_patches}, {cfg.patch_dim}), got {patches.shape}")
    b = patches.shape[0]
    n1 = cfg.num_patches + 1
    hh, dh, d = cfg.num_heads, cfg.head_dim, cfg.embed_dim
    x = _linear(patches, params, "patch_embed")
    cls = params["cls_token"].reshape((1, 1, d)) * np.ones((b, 1, 1))
    x = T.concat([cls, x], axis=1) + params["pos_embed"]
    inv_sqrt = 1.0 / math.sqrt(dh)
    attn_maps = []
    for l in range(cfg.num_layers):
        pre = f"layers.{l}."
        try:
            h = _affine_norm(x, params, pre + "ln1")
            q = _linear(h, params, pre + "attn.q").reshape((b, n1, hh, dh)).transpose((0, 2, 1, 3))
            k = _linear(h, params, pre + "attn.k").reshape((b, n1, hh, dh)).transpose((0, 2, 3, 1))
            v = _linear(h, params, pre + "attn.v").reshape((b, n1, hh, dh)).transpose((0, 2, 1, 3))
            a = T.softmax(T.scale(q @ k, inv_sqrt))
            attn_maps.append(a)
            ctx = (a @ v).transpose((0, 2, 1, 3)).reshape((b, n1, d))
            x = x + _linear(ctx, params, pre + "attn.o")
            h = _affine_norm(x, params, pre + "ln2")
            x = x + _linear(T.gelu(_linear(h, params, pre + "ffn.fc1")), params, pre + "ffn.fc2")
        except NonFiniteError as exc:
            raise NonFiniteError(f"layer {l}: {exc}") from exc
        _check_layer(x, l)
    return _affine_norm(x, params, "norm"), attn_maps


def head(params: dict[str, Tensor], name: str, features: Tensor) -> Tensor:
    return _linear(T.gelu(_linear(features, params, name + ".fc1")), params, name + ".fc2")


def forward_patches(params: dict[str, Tensor], cfg: ViTConfig, patches, reverse_target: float | None = None) -> ViTActivations:
    """Forward from patch vectors.

    ``reverse_target`` inserts a gradient-reversal op (with that coefficient)
    between the shared features and the target head.
    """
    tokens, attn = encode(params, cfg, patches)
    feats = tokens[:, 0, :]
    t_in = feats if reverse_target is None else T.grad_reverse(feats, reverse_target)
    return ViTActivations(
        attn=attn,
        features=feats,
        logits_target=head(params, "head_t", t_in),
        logits_sensitive=head(params, "head_s", feats),
    )


def forward(params: dict[str, Tensor], cfg: ViTConfig, images, reverse_target: float | None = None) -> ViTActivations:
    """Forward from images (B, C, H, W)."""
    expected = (cfg.channels,) + cfg.image_hw
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise T.ShapeError(f"expected images (B, {expected}), got {tuple(images.shape)}")
    return forward_patches(params, cfg, patchify(images, cfg.patch_size), reverse_target)


def predict(params: dict[str, Tensor], cfg: ViTConfig, images: np.ndarray,
            batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions of (target head, sensitive head) without recording."""
    pt, ps = [], []
    with T.no_grad():
        for i in range(0, len(images), batch):
            acts = forward(params, cfg, images[i:i + batch])
            pt.append(acts.logits_target.data.argmax(-1))
            ps.append(acts.logits_sensitive.data.argmax(-1))
    if not pt:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(pt), np.concatenate(ps)


def copy_params(params: dict[str, Tensor], requires_grad: bool | None = None) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
            for k, v in params.items()}
