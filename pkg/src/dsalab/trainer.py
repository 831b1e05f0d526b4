"""Step two: training the target model, plain or debiased.

Modes:

* ``vanilla``: ``lambda1 * CE(x, y)``;
* ``am``:      ``lambda1 * CE(x, y) + lambda2 * CE(x_masked, y)``, where
  ``x_masked`` has the bias-only model's top-``k`` patches blanked;
* ``dsa``:     ``lambda1 * CE(x, y) + lambda2 * CE(x', y) + lambda3 * L_A``,
  with ``x'`` the attacked copy of ``x`` and ``L_A`` the attention alignment
  between the two.

Both images of a pair go through the model in the same forward pass, so the
two attention maps come from the same (live) parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Literal

import numpy as np

from . import align
from . import attack
from . import tensor as T
from . import vit
from .data import Dataset, stratified_split
from .fairness import FairnessReport, Undefined, evaluate_predictions
from .loop import fit
from .tensor import Tensor
from .vit import ViTConfig

MODES = ("vanilla", "am", "dsa")
LOG_COLUMNS = ("epoch", "loss", "L_CE", "L_CE_adv", "L_A",
               "val_ACC", "val_abs_EO", "val_abs_DP", "val_abs_DBA", "val_BA", "selected")


@dataclass(frozen=True)
class TrainConfig:
    mode: Literal["vanilla", "am", "dsa"] = "dsa"
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    align: str = "at"
    align_rows: str = "all"
    align_unit: str = "map"
    k: int = attack.DEFAULT_K
    am_fill: str = "zero"
    epochs: int = 20
    batch: int = 32
    lr: float = 3e-2
    momentum: float = 0.9
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    val_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.align not in align.METRICS:
            raise ValueError(f"align must be one of {align.METRICS}, got {self.align!r}")
        if self.mode == "vanilla" and (self.lambda2 or self.lambda3):
            object.__setattr__(self, "lambda2", 0.0)
            object.__setattr__(self, "lambda3", 0.0)
        if self.align_unit not in align.UNITS:
            raise ValueError(f"align_unit must be one of {align.UNITS}, got {self.align_unit!r}")
        if not 0.0 <= self.val_frac < 1.0:
            raise ValueError("val_frac must lie in [0, 1)")


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    ce_adv: Tensor | None
    align: Tensor | None

    def as_floats(self) -> dict[str, float]:
        f = lambda t: 0.0 if t is None else float(t.data)
        return {"loss": f(self.total), "L_CE": f(self.ce), "L_CE_adv": f(self.ce_adv), "L_A": f(self.align)}


def dsa_loss(params: dict[str, Tensor], cfg: ViTConfig, x: np.ndarray, x_adv: np.ndarray | None,
             y, tc: TrainConfig, align_weights=None) -> LossTerms:
    """The weighted objective for one batch of (x, x') pairs sharing labels ``y``."""
    y = np.asarray(y)
    b = len(x)
    need_adv = tc.lambda2 > 0 or tc.lambda3 > 0
    if not need_adv:
        acts = vit.forward(params, cfg, x)
        ce = T.cross_entropy(acts.logits_target, y)
        return LossTerms(T.scale(ce, tc.lambda1), ce, None, None)
    if x_adv is None:
        raise ValueError("this objective needs paired examples x'")
    if x_adv.shape != x.shape:
        raise T.ShapeError(f"x {x.shape} and x' {x_adv.shape} are not paired")
    acts = vit.forward(params, cfg, np.concatenate([x, x_adv]))
    logits = acts.logits_target
    ce = T.cross_entropy(logits[:b], y)
    ce_adv = T.cross_entropy(logits[b:], y)
    total = T.scale(ce, tc.lambda1) + T.scale(ce_adv, tc.lambda2)
    la = None
    if tc.lambda3 > 0:
        la = align.alignment_loss([a[:b] for a in acts.attn], [a[b:] for a in acts.attn],
                                  tc.align, tc.align_rows, align_weights, tc.align_unit)
        total = total + T.scale(la, tc.lambda3)
    return LossTerms(total, ce, ce_adv, la)


def evaluate(params: dict[str, Tensor], cfg: ViTConfig, data: Dataset,
             batch: int = 256) -> tuple[FairnessReport, np.ndarray]:
    """Fairness report of the target head on ``data`` and the per-example predictions."""
    if len(data) and (data.channels, data.image_hw) != (cfg.channels, cfg.image_hw):
        raise T.ShapeError(f"dataset geometry {data.channels}x{data.image_hw} does not match "
                           f"model {cfg.channels}x{cfg.image_hw}")
    pred, _ = vit.predict(params, cfg, data.images.astype(np.float64), batch)
    return evaluate_predictions(pred, data.y, data.s), pred


def _num(v) -> float | str:
    return "" if isinstance(v, Undefined) else float(v)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    config: ViTConfig
    log: list[dict]
    best_epoch: int
    best_val_acc: float


def train(tc: TrainConfig, data: Dataset, adv_images: np.ndarray | None = None,
          bias_model: tuple[dict[str, Tensor], ViTConfig] | None = None,
          model_cfg: ViTConfig | None = None) -> TrainResult:
    """Train from scratch and keep the epoch with the best validation accuracy.

    ``adv_images`` (index-aligned with ``data``) are required for ``dsa``;
    ``bias_model`` is required for ``am``.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    model_cfg = model_cfg or ViTConfig(image_hw=data.image_hw, channels=data.channels)
    images = data.images.astype(np.float64)
    pair = None
    weights = None
    if tc.mode == "dsa" and (tc.lambda2 > 0 or tc.lambda3 > 0):
        if adv_images is None:
            raise ValueError("mode 'dsa' needs the attacked (augmented) images")
        pair = np.asarray(adv_images, dtype=np.float64)
        if pair.shape != images.shape:
            raise T.ShapeError(f"augmented images {pair.shape} do not pair with {images.shape}")
    elif tc.mode == "am" and tc.lambda2 > 0:
        if bias_model is None:
            raise ValueError("mode 'am' needs the bias-only model")
        bp, bcfg = bias_model
        pair, _ = attack.am_mask(bp, bcfg, images, tc.k, tc.am_fill)
        tc = replace(tc, lambda3=0.0)
    if pair is not None and tc.mode == "dsa":
        # pairs whose attack failed hold the clean image; they carry no alignment signal
        weights = np.any(pair != images, axis=(1, 2, 3)).astype(float)

    keep, held = stratified_split(data, tc.val_frac, tc.seed)
    val = data.subset(held)
    params = vit.init_params(model_cfg, tc.seed)
    rows: list[dict] = []
    best = {"acc": -1.0, "epoch": -1, "params": None}

    def step_loss(idx):
        gi = keep[idx]
        terms = dsa_loss(params, model_cfg, images[gi], None if pair is None else pair[gi],
                         data.y[gi], tc, None if weights is None else weights[gi])
        return terms.total, terms.as_floats()

    def on_epoch(epoch, summary):
        rep, _ = evaluate(params, model_cfg, val) if len(val) else (None, None)
        acc = float(rep.acc) if rep is not None and not isinstance(rep.acc, Undefined) else 0.0
        selected = acc > best["acc"] if rep is not None else True
        if selected:
            best.update(acc=acc, epoch=epoch, params=vit.copy_params(params))
        row = {"epoch": epoch, **summary}
        if rep is not None:
            row.update(val_ACC=_num(rep.acc), val_abs_EO=_num(rep.abs_eo), val_abs_DP=_num(rep.abs_dp),
                       val_abs_DBA=_num(rep.abs_dba), val_BA=_num(rep.ba))
        row["selected"] = int(selected)
        rows.append({c: row.get(c, "") for c in LOG_COLUMNS})

    fit(params, len(keep), step_loss, tc.epochs, tc.batch, tc.lr, tc.momentum,
        tc.grad_clip, tc.warmup_frac, tc.seed, on_epoch)
    if best["params"] is None:
        best.update(epoch=tc.epochs - 1, params=params)
    return TrainResult(best["params"], model_cfg, rows, best["epoch"], best["acc"])


def config_dict(tc: TrainConfig) -> dict:
    return asdict(tc)
