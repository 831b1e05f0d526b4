"""Step one: a model whose shared extractor encodes the sensitive cue and not the target.

The sensitive head minimizes cross-entropy on ``s`` while the target head is
pushed away from ``y``. Two ways of doing the pushing are offered:

* ``literal``: minimize ``L_S - min(L_T, clamp)`` over every parameter, so the
  target head itself ascends its loss;
* ``grl``: the target head minimizes ``L_T`` but the gradient reaching the
  extractor from it is multiplied by ``-grl_lambda``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from . import tensor as T
from . import vit
from .data import Dataset
from .loop import fit
from .tensor import Tensor
from .vit import ViTConfig

LOG_COLUMNS = ("epoch", "L_S", "L_T", "acc_s", "acc_y")


@dataclass(frozen=True)
class BiasOnlyConfig:
    epochs: int = 20
    lr: float = 3e-2
    batch: int = 32
    grad_clip: float = 1.0
    momentum: float = 0.9
    warmup_frac: float = 0.05
    reversal_mode: Literal["literal", "grl"] = "literal"
    grl_lambda: float = 1.0
    clamp: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.reversal_mode not in ("literal", "grl"):
            raise ValueError(f"reversal_mode must be 'literal' or 'grl', got {self.reversal_mode!r}")
        if self.reversal_mode == "grl" and self.grl_lambda <= 0:
            raise ValueError("grl_lambda must be positive in grl mode")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")


def loss_sensitive(acts: vit.ViTActivations, s) -> Tensor:
    return T.cross_entropy(acts.logits_sensitive, s)


def loss_target(acts: vit.ViTActivations, y) -> Tensor:
    return T.cross_entropy(acts.logits_target, y)


def loss_bias_only(acts: vit.ViTActivations, s, y, clamp: float | None = 20.0) -> tuple[Tensor, Tensor, Tensor]:
    """``L_S - L_T`` with the ascended term capped at ``clamp``; returns (L_B, L_S, L_T)."""
    ls = loss_sensitive(acts, s)
    lt = loss_target(acts, y)
    capped = lt if clamp is None else T.minimum(lt, clamp)
    return ls - capped, ls, lt


@dataclass
class BiasOnlyResult:
    params: dict[str, Tensor]
    config: ViTConfig
    log: list[dict]


def train_bias_only(cfg: BiasOnlyConfig, data: Dataset, model_cfg: ViTConfig | None = None,
                    init_seed: int | None = None) -> BiasOnlyResult:
    """Train from scratch; the log has one row per epoch with training-set averages."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model_cfg = model_cfg or ViTConfig(image_hw=data.image_hw, channels=data.channels)
    params = vit.init_params(model_cfg, cfg.seed if init_seed is None else init_seed)
    images = data.images.astype(np.float64)
    reverse = cfg.grl_lambda if cfg.reversal_mode == "grl" else None
    rows: list[dict] = []

    def step_loss(idx):
        acts = vit.forward(params, model_cfg, images[idx], reverse_target=reverse)
        s, y = data.s[idx], data.y[idx]
        if cfg.reversal_mode == "grl":
            ls, lt = loss_sensitive(acts, s), loss_target(acts, y)
            loss = ls + lt
        else:
            loss, ls, lt = loss_bias_only(acts, s, y, cfg.clamp)
        terms = {
            "L_S": float(ls.data), "L_T": float(lt.data),
            "acc_s": float(np.mean(acts.logits_sensitive.data.argmax(-1) == s)),
            "acc_y": float(np.mean(acts.logits_target.data.argmax(-1) == y)),
        }
        return loss, terms

    def on_epoch(epoch, summary):
        rows.append({"epoch": epoch, **{k: summary[k] for k in LOG_COLUMNS[1:]}})

    fit(params, len(data), step_loss, cfg.epochs, cfg.batch, cfg.lr, cfg.momentum,
        cfg.grad_clip, cfg.warmup_frac, cfg.seed, on_epoch)
    return BiasOnlyResult(params, model_cfg, rows)


def config_dict(cfg: BiasOnlyConfig) -> dict:
    return asdict(cfg)
