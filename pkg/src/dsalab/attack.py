"""Attention-guided patch attack against a frozen bias-only model, and attention masking.

Positions vs patches: attention tensors index *sequence positions*, where
position 0 is the class token and position ``j + 1`` is image patch ``j``.
:func:`patch_importance` and :func:`attention_loss` speak positions;
:func:`select_patches`, :func:`run_attack` and :func:`am_mask` speak image
patch ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from . import vit
from .data import Dataset
from .optim import Adam
from .tensor import NonFiniteError, Tensor
from .vit import ViTActivations, ViTConfig

log = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_ALPHA = 0.5
DEFAULT_ETA = 0.05
DEFAULT_STEPS = 100


# ---------------------------------------------------------------------------
# importance and selection


@dataclass
class PatchImportance:
    """Attention received per position.

    ``per_layer`` is (B, L, n+1); ``score`` is the aggregate used for ranking
    (B, n+1); ``ranking`` lists positions by descending score, ties to the
    lower position.
    """

    per_layer: np.ndarray
    score: np.ndarray
    ranking: np.ndarray


def _stable_rank(score: np.ndarray) -> np.ndarray:
    # stable sort on -score keeps the lower index first among ties
    return np.argsort(-score, axis=-1, kind="stable")


def importance_from_attention(attn: np.ndarray, layer: int | None = None,
                              exclude_cls_row: bool = False) -> PatchImportance:
    """``attn``: (B, L, heads, N, N) or (L, heads, N, N) attention weights."""
    attn = np.asarray(attn, dtype=float)
    single = attn.ndim == 4
    if single:
        attn = attn[None]
    if attn.ndim != 5:
        raise ValueError(f"attention must be (B, L, heads, N, N), got {attn.shape}")
    if exclude_cls_row:
        attn = attn[:, :, :, 1:, :]
    per_layer = attn.sum(axis=(2, 3))
    n_layers = per_layer.shape[1]
    if layer is None:
        score = per_layer.sum(axis=1)
    else:
        if not -n_layers <= layer < n_layers:
            raise IndexError(f"layer {layer} out of range for {n_layers} layers")
        score = per_layer[:, layer]
    out = PatchImportance(per_layer, score, _stable_rank(score))
    if single:
        out = PatchImportance(per_layer[0], score[0], out.ranking[0])
    return out


def patch_importance(acts: ViTActivations, layer: int | None = None,
                     exclude_cls_row: bool = False) -> PatchImportance:
    """Column sums of the attention maps: ``t_j = sum over heads and query rows``.

    ``layer=None`` sums the per-layer scores over all layers.
    """
    return importance_from_attention(acts.attention, layer, exclude_cls_row)


def select_patches(importance: PatchImportance, k: int, exclude: Sequence[int] = ()) -> np.ndarray:
    """Top-``k`` image patch ids per example (B, k), highest score first.

    The class token is never selectable; ``exclude`` lists further patch ids
    to skip.
    """
    ranking = np.atleast_2d(importance.ranking)
    n = ranking.shape[1] - 1
    banned = {0} | {int(j) + 1 for j in exclude}
    available = n - len(banned - {0})
    if not 1 <= k <= available:
        raise ValueError(f"k={k} must lie in [1, {available}]")
    out = np.empty((ranking.shape[0], k), dtype=np.int64)
    for b, row in enumerate(ranking):
        picked = [int(p) - 1 for p in row if int(p) not in banned][:k]
        out[b] = picked
    return out[0] if np.ndim(importance.ranking) == 1 else out


# ---------------------------------------------------------------------------
# losses


def attention_loss(attn: Sequence[Tensor], positions) -> list[Tensor]:
    """Per layer, the attention mass the given positions receive: (B,) per layer.

    ``positions`` is (B, k) (or (k,) shared by the batch) of sequence positions.
    """
    out = []
    for a in attn:
        b, h, n1, _ = a.shape
        pos = np.asarray(positions, dtype=np.int64)
        if pos.ndim == 1:
            pos = np.broadcast_to(pos, (b, pos.size))
        if pos.size == 0:
            raise ValueError("attention_loss needs at least one position")
        onehot = np.zeros((b, 1, 1, n1))
        np.put_along_axis(onehot[:, 0, 0, :], pos, 1.0, axis=1)
        out.append((a * onehot).reshape((b, -1)).sum(axis=1))
    return out


@dataclass
class AttackLosses:
    """Per-example terms (B,) of the attack objective."""

    sensitive: Tensor
    target: Tensor
    attention: list[Tensor]
    alpha: float

    @property
    def total(self) -> Tensor:
        out = self.sensitive - self.target
        for a in self.attention:
            out = out + T.scale(a, self.alpha)
        return out


def attack_loss(params, cfg: ViTConfig, patches, s, y, positions, alpha: float = DEFAULT_ALPHA
                ) -> tuple[AttackLosses, ViTActivations]:
    """``L_S - L_T + alpha * sum_l L_Attn`` per example, to be maximized."""
    acts = vit.forward_patches(params, cfg, patches)
    losses = AttackLosses(
        sensitive=T.cross_entropy(acts.logits_sensitive, s, reduction="none"),
        target=T.cross_entropy(acts.logits_target, y, reduction="none"),
        attention=attention_loss(acts.attn, positions),
        alpha=alpha,
    )
    return losses, acts


# ---------------------------------------------------------------------------
# gradient surgery


def pcgrad_combine(grad_total, grad_s, grad_attn: Sequence, alpha: float = DEFAULT_ALPHA,
                   batched: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Combine gradients as ``delta = grad_total - alpha * sum_l beta_l * grad_s``.

    ``beta_l`` is 0 when ``<grad_s, grad_attn_l> > 0`` and
    ``<grad_s, grad_attn_l> / ||grad_s||^2`` otherwise. With ``batched=True``
    the leading axis indexes independent problems and the betas are computed
    per problem. Returns ``(delta, beta)``; beta is (L,) or (B, L).
    """
    gt = np.asarray(grad_total, dtype=float)
    gs = np.asarray(grad_s, dtype=float)
    ga = [np.asarray(g, dtype=float) for g in grad_attn]
    if gs.shape != gt.shape or any(g.shape != gt.shape for g in ga):
        raise ValueError("pcgrad_combine: gradients differ in shape")
    if not batched:
        delta, beta = pcgrad_combine(gt[None], gs[None], [g[None] for g in ga], alpha, batched=True)
        return delta[0], beta[0]
    b = gt.shape[0]
    flat_s = gs.reshape(b, -1)
    norm2 = np.einsum("bi,bi->b", flat_s, flat_s)
    beta = np.zeros((b, len(ga)))
    for l, g in enumerate(ga):
        dot = np.einsum("bi,bi->b", flat_s, g.reshape(b, -1))
        conflict = dot <= 0
        degenerate = conflict & (norm2 == 0)
        if degenerate.any():
            log.warning("pcgrad: zero sensitive-loss gradient in %d problem(s), layer %d; beta forced to 0",
                        int(degenerate.sum()), l)
        ok = conflict & ~degenerate
        beta[ok, l] = dot[ok] / norm2[ok]
    scale = alpha * beta.sum(axis=1)
    delta = gt - scale.reshape((b,) + (1,) * (gt.ndim - 1)) * gs
    return delta, beta


# ---------------------------------------------------------------------------
# the attack


@dataclass
class AttackTrace:
    """Per-step, per-example values, each (steps, B)."""

    sensitive: np.ndarray
    target: np.ndarray
    attention: np.ndarray
    total: np.ndarray


@dataclass
class AttackResult:
    images: np.ndarray           # (B, C, H, W) perturbed images, f64
    patches: np.ndarray          # (B, k) attacked patch ids
    trace: AttackTrace
    clean_pred_s: np.ndarray
    adv_pred_s: np.ndarray
    beta: np.ndarray = field(repr=False)   # (steps, B, L)

    @property
    def flipped(self) -> np.ndarray:
        return self.adv_pred_s != self.clean_pred_s


def patch_mask(patch_ids: np.ndarray, num_patches: int) -> np.ndarray:
    """One-hot row mask (B, n) from patch ids (B, k)."""
    patch_ids = np.atleast_2d(patch_ids)
    m = np.zeros((patch_ids.shape[0], num_patches))
    if patch_ids.size:
        np.put_along_axis(m, patch_ids, 1.0, axis=1)
    return m


def _importance_for(params, cfg, images, exclude_cls_row, layer) -> PatchImportance:
    with T.no_grad():
        acts = vit.forward(params, cfg, images)
    return patch_importance(acts, layer, exclude_cls_row)


def run_attack(params: dict[str, Tensor], cfg: ViTConfig, images: np.ndarray, s, y,
               k: int = DEFAULT_K, alpha: float = DEFAULT_ALPHA, eta: float = DEFAULT_ETA,
               steps: int = DEFAULT_STEPS, project: bool = True, exclude_cls_row: bool = False,
               layer: int | None = None, pcgrad: bool = True, patches=None) -> AttackResult:
    """Attack a batch of images against the frozen model ``params``.

    Each example gets its own perturbation ``E`` on its own top-``k`` patches
    (``patches`` overrides the selection); the Adam moments are elementwise,
    so one batched Adam is the same as one Adam per example.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    images = np.asarray(images, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    b = len(images)
    n = cfg.num_patches
    if patches is None:
        patches = select_patches(_importance_for(params, cfg, images, exclude_cls_row, layer), k)
        patches = np.atleast_2d(patches)
    patches = np.asarray(patches, dtype=np.int64).reshape(b, -1)
    mask = patch_mask(patches, n)[:, :, None]
    positions = patches + 1

    x = vit.patchify(images, cfg.patch_size)
    e = np.zeros_like(x)
    adam = Adam(lr=eta)
    frozen = vit.copy_params(params, requires_grad=False)
    tr = {key: np.zeros((steps, b)) for key in ("sensitive", "target", "attention", "total")}
    betas = np.zeros((steps, b, cfg.num_layers))
    clean_pred = None
    for step in range(steps):
        xp = Tensor(x + e, requires_grad=True)
        try:
            losses, acts = attack_loss(frozen, cfg, xp, s, y, positions, alpha)
            if clean_pred is None:
                clean_pred = acts.logits_sensitive.data.argmax(-1)
            total = losses.total
            g_total = T.grad(total.sum(), [xp])[0]
            g_s = T.grad(losses.sensitive.sum(), [xp])[0]
            if pcgrad:
                g_attn = [T.grad(a.sum(), [xp])[0] for a in losses.attention]
                delta, beta = pcgrad_combine(g_total, g_s, g_attn, alpha, batched=True)
                betas[step] = beta
            else:
                delta = g_total
        except NonFiniteError as exc:
            raise NonFiniteError(f"attack step {step}: {exc}") from exc
        finally:
            T.reset_tape()
        if not np.isfinite(delta).all():
            raise NonFiniteError(f"attack step {step}: non-finite gradient")
        tr["sensitive"][step] = losses.sensitive.data
        tr["target"][step] = losses.target.data
        tr["attention"][step] = np.sum([a.data for a in losses.attention], axis=0)
        tr["total"][step] = total.data
        e = e + eta * adam.direction([delta * mask])[0]
        e *= mask
        if project:
            e = (np.clip(x + e, 0.0, 1.0) - x) * mask
    adv = vit.unpatchify(x + e, cfg.patch_size, cfg.channels, cfg.image_hw)
    _, adv_pred = vit.predict(frozen, cfg, adv)
    return AttackResult(adv, patches, AttackTrace(**tr), clean_pred, adv_pred, betas)


# ---------------------------------------------------------------------------
# attention masking baseline


def am_mask(params: dict[str, Tensor], cfg: ViTConfig, images: np.ndarray, k: int = DEFAULT_K,
            fill_mode: str = "zero", fill_value=None, exclude_cls_row: bool = False,
            layer: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replace each image's top-``k`` attended patches with a fill value.

    ``fill_mode`` is ``"zero"`` or ``"dataset-mean"``; for the latter
    ``fill_value`` is the per-channel mean (defaults to the batch mean).
    Returns (masked images, patch ids (B, k)).
    """
    images = np.asarray(images)
    if k == 0:
        return images.copy(), np.zeros((len(images), 0), dtype=np.int64)
    if fill_mode == "zero":
        fill = np.zeros(cfg.channels)
    elif fill_mode == "dataset-mean":
        fill = (images.mean(axis=(0, 2, 3)) if fill_value is None
                else np.broadcast_to(np.asarray(fill_value, float), (cfg.channels,)))
    else:
        raise ValueError(f"fill_mode must be 'zero' or 'dataset-mean', got {fill_mode!r}")
    imp = _importance_for(params, cfg, images.astype(np.float64), exclude_cls_row, layer)
    ids = np.atleast_2d(select_patches(imp, k))
    out = images.copy()
    p = cfg.patch_size
    gw = cfg.grid[1]
    for b, row in enumerate(ids):
        for j in row:
            r0, c0 = (j // gw) * p, (j % gw) * p
            out[b, :, r0:r0 + p, c0:c0 + p] = fill[:, None, None]
    return out, ids


# ---------------------------------------------------------------------------
# whole-dataset driver


SIDECAR_COLUMNS = ("index", "patches", "L_S", "L_T", "L_Attn", "flipped")


def attack_dataset(params: dict[str, Tensor], cfg: ViTConfig, data: Dataset, k: int = DEFAULT_K,
                   alpha: float = DEFAULT_ALPHA, eta: float = DEFAULT_ETA, steps: int = DEFAULT_STEPS,
                   batch: int = 250, project: bool = True, exclude_cls_row: bool = False,
                   keep_failed: bool = False) -> tuple[Dataset, list[dict]]:
    """Attack every example; returns the augmented dataset and sidecar rows.

    Examples whose sensitive prediction did not flip keep their clean image
    in the augmented set unless ``keep_failed`` is set.
    """
    out = data.images.copy()
    rows = []
    for i0 in range(0, len(data), batch):
        sl = slice(i0, i0 + batch)
        res = run_attack(params, cfg, data.images[sl], data.s[sl], data.y[sl], k=k, alpha=alpha,
                         eta=eta, steps=steps, project=project, exclude_cls_row=exclude_cls_row)
        flipped = res.flipped
        for j in range(len(res.patches)):
            if flipped[j] or keep_failed:
                out[i0 + j] = res.images[j]
            rows.append({
                "index": i0 + j,
                "patches": " ".join(str(int(p)) for p in res.patches[j]),
                "L_S": float(res.trace.sensitive[-1, j]),
                "L_T": float(res.trace.target[-1, j]),
                "L_Attn": float(res.trace.attention[-1, j]),
                "flipped": int(flipped[j]),
            })
    return data.with_images(out), rows
