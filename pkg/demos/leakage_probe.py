"""How much label information survives in the attacked training images?

Trains the bias-only model and attacks the training set (benchmark settings,
seed 0), then fits two least-squares linear probes with a half/half split:

* corner pixels of the attacked image -> the original sensitive label s
* the perturbation x' - x outside the corner -> the target label y

High probe accuracy means the attacked copy still carries the label it was
supposed to hide, or gives the target away through the perturbation itself.

    python demos/leakage_probe.py [seed]
"""

import sys

import numpy as np

from dsalab import attack, biasonly
from dsalab import data as D
from dsalab.benchmark import BenchmarkConfig


def probe(features: np.ndarray, labels: np.ndarray) -> float:
    n = len(labels)
    half = n // 2
    x = np.hstack([features, np.ones((n, 1))])
    w, *_ = np.linalg.lstsq(x[:half], 2.0 * labels[:half] - 1.0, rcond=None)
    return float(np.mean((x[half:] @ w > 0) == labels[half:]))


def main(seed: int = 0) -> None:
    cfg = BenchmarkConfig()
    tr, _ = D.generate(D.DatasetSpec(n_train=cfg.n_train, n_test=cfg.n_test, rho=cfg.rho, seed=seed))
    bias = biasonly.train_bias_only(biasonly.BiasOnlyConfig(epochs=cfg.epochs, seed=seed), tr)
    aug, rows = attack.attack_dataset(bias.params, bias.config, tr, k=cfg.k, eta=cfg.attack_eta,
                                      steps=cfg.attack_steps, batch=cfg.attack_batch)
    flipped = np.array([r["flipped"] for r in rows], dtype=bool)
    p = bias.config.patch_size
    x, xa = tr.images.astype(np.float64), aug.images.astype(np.float64)
    corner = xa[:, :, :p, :p].reshape(len(tr), -1)
    delta = xa - x
    delta[:, :, :p, :p] = 0.0
    delta = delta.reshape(len(tr), -1)
    print(f"seed {seed}: {flipped.mean():.2f} of {len(tr)} training images flipped")
    print(f"  attacked corner -> original s     : {probe(corner[flipped], tr.s[flipped]):.3f}")
    print(f"  perturbation off the corner -> y  : {probe(delta[flipped], tr.y[flipped]):.3f}")
    print(f"  clean corner -> s (reference)     : {probe(x[:, :, :p, :p].reshape(len(tr), -1), tr.s):.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
