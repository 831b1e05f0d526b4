"""The synthetic end-to-end comparison: vanilla, AM and DSA on one seed.

The defaults are sized so five seeds fit in a few CPU minutes: a 250-image
training set and a 40-step attack with a larger step than the library
default.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import attack
from . import biasonly
from . import tensor as T
from . import data as D
from . import trainer
from . import vit
from .fairness import FairnessReport


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 250
    n_test: int = 500
    rho: float = 0.95
    k: int = attack.DEFAULT_K
    attack_steps: int = 40
    attack_eta: float = 0.1
    attack_batch: int = 125
    epochs: int = 20
    modes: tuple[str, ...] = ("vanilla", "am", "dsa", "dsa_no_align")


@dataclass
class SeedResult:
    seed: int
    bias_acc_s: float
    bias_acc_y: float
    flip_rate: float
    hit_k1: float = float("nan")
    hit_top3: float = float("nan")
    reports: dict[str, FairnessReport] = field(default_factory=dict)
    positive_rate: dict[str, float] = field(default_factory=dict)
    best_epoch: dict[str, int] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    bias_model: tuple | None = field(default=None, repr=False)
    test: D.Dataset | None = field(default=None, repr=False)

    def abs_eo(self, mode: str) -> float:
        return float(self.reports[mode].abs_eo)

    def acc(self, mode: str) -> float:
        return float(self.reports[mode].acc)


def localization(params, cfg: vit.ViTConfig, data: D.Dataset, spurious=(0,)) -> tuple[float, float]:
    """Fractions of images whose top-1 (and top-3) attended patches include a spurious patch."""
    with T.no_grad():
        imp = attack.patch_importance(vit.forward(params, cfg, data.images.astype(np.float64)))
    top3 = attack.select_patches(imp, 3)
    hit1 = np.isin(top3[:, 0], spurious)
    hit3 = np.isin(top3, spurious).any(axis=1)
    return float(hit1.mean()), float(hit3.mean())


def attack_eval(params, cfg: vit.ViTConfig, data: D.Dataset, bc: BenchmarkConfig = BenchmarkConfig()
                ) -> tuple[float, float]:
    """Attack every image of ``data``; returns (flip rate, seconds)."""
    t = time.perf_counter()
    _, rows = attack.attack_dataset(params, cfg, data, k=bc.k, eta=bc.attack_eta,
                                    steps=bc.attack_steps, batch=bc.attack_batch)
    return float(np.mean([r["flipped"] for r in rows])), time.perf_counter() - t


def train_config(mode: str, seed: int, cfg: BenchmarkConfig) -> trainer.TrainConfig:
    if mode == "dsa_no_align":
        return trainer.TrainConfig(mode="dsa", lambda3=0.0, k=cfg.k, epochs=cfg.epochs, seed=seed)
    return trainer.TrainConfig(mode=mode, k=cfg.k, epochs=cfg.epochs, seed=seed)


def run_seed(seed: int, cfg: BenchmarkConfig = BenchmarkConfig(), log=None) -> SeedResult:
    log = log or (lambda msg: None)
    tr, te = D.generate(D.DatasetSpec(n_train=cfg.n_train, n_test=cfg.n_test, rho=cfg.rho, seed=seed))
    t0 = time.perf_counter()
    bias = biasonly.train_bias_only(biasonly.BiasOnlyConfig(epochs=cfg.epochs, seed=seed), tr)
    t1 = time.perf_counter()
    pred_y, pred_s = vit.predict(bias.params, bias.config, te.images.astype(np.float64))
    aug, rows = attack.attack_dataset(bias.params, bias.config, tr, k=cfg.k, eta=cfg.attack_eta,
                                      steps=cfg.attack_steps, batch=cfg.attack_batch)
    t2 = time.perf_counter()
    res = SeedResult(seed, float(np.mean(pred_s == te.s)), float(np.mean(pred_y == te.y)),
                     float(np.mean([r["flipped"] for r in rows])))
    res.seconds.update(bias_only=t1 - t0, attack=t2 - t1)
    res.hit_k1, res.hit_top3 = localization(bias.params, bias.config, te)
    res.bias_model = (bias.params, bias.config)
    res.test = te
    log(f"seed {seed}: bias-only acc_s {res.bias_acc_s:.3f} acc_y {res.bias_acc_y:.3f}, "
        f"attack flips {res.flip_rate:.2f}, spurious patch top-1 {res.hit_k1:.2f}")
    for mode in cfg.modes:
        t = time.perf_counter()
        out = trainer.train(train_config(mode, seed, cfg), tr, adv_images=aug.images,
                            bias_model=(bias.params, bias.config))
        rep, pred = trainer.evaluate(out.params, out.config, te)
        res.reports[mode] = rep
        res.positive_rate[mode] = float(np.mean(pred))
        res.best_epoch[mode] = out.best_epoch
        res.seconds[mode] = time.perf_counter() - t
        log(f"  {mode:13s} |EO| {float(rep.abs_eo):.3f}  ACC {float(rep.acc):.3f}  "
            f"P(yhat=1) {res.positive_rate[mode]:.2f}  best epoch {out.best_epoch}")
    return res
