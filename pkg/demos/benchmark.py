"""Vanilla vs AM vs DSA (and DSA without alignment) on the synthetic benchmark.

Prints one line per seed and model, then the medians. Five seeds take about
eight minutes on one CPU core.

    python demos/benchmark.py [n_seeds]
"""

import sys

import numpy as np

from dsalab import benchmark


def main(n_seeds: int = 5) -> None:
    cfg = benchmark.BenchmarkConfig()
    runs = [benchmark.run_seed(seed, cfg, log=print) for seed in range(n_seeds)]
    print("\nmedians over seeds")
    print(f"  bias-only test acc_s {np.median([r.bias_acc_s for r in runs]):.3f}  "
          f"acc_y {np.median([r.bias_acc_y for r in runs]):.3f}")
    for mode in cfg.modes:
        eo = np.median([r.abs_eo(mode) for r in runs])
        acc = np.median([r.acc(mode) for r in runs])
        pos = np.median([r.positive_rate[mode] for r in runs])
        print(f"  {mode:13s} |EO| {eo:.3f}  ACC {acc:.3f}  P(yhat=1) {pos:.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
