"""The SGD loop shared by bias-only and debiased training."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .optim import SGD, clip_global_norm, lr_schedule
from .tensor import NonFiniteError, Tensor


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), 0x45504F43_00000000 | epoch]))
    return rng.permutation(n)


def fit(params: dict[str, Tensor], n: int, step_loss: Callable[[np.ndarray], tuple[Tensor, dict]],
        epochs: int, batch: int, lr: float, momentum: float, grad_clip: float, warmup_frac: float,
        seed: int, on_epoch: Callable[[int, dict], None] | None = None) -> None:
    """Minimize ``step_loss(batch_indices)`` over shuffled minibatches.

    ``step_loss`` returns the scalar loss and a dict of floats that are
    averaged (weighted by batch size) into the per-epoch summary passed to
    ``on_epoch(epoch, summary)``.
    """
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    plist = list(params.values())
    opt = SGD(plist, lr=lr, momentum=momentum)
    per_epoch = -(-n // batch)
    total = epochs * per_epoch
    warmup = int(round(warmup_frac * total))
    step = 0
    for epoch in range(epochs):
        order = epoch_order(n, seed, epoch)
        sums: dict[str, float] = {}
        for i0 in range(0, n, batch):
            idx = order[i0:i0 + batch]
            try:
                loss, terms = step_loss(idx)
                T.backward(loss)
            except NonFiniteError as exc:
                T.reset_tape()
                raise NonFiniteError(f"epoch {epoch} step {step}: {exc}") from exc
            for p in plist:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            gnorm = clip_global_norm(plist, grad_clip)
            if not np.isfinite(gnorm):
                raise NonFiniteError(f"epoch {epoch} step {step}: non-finite gradient norm")
            opt.lr = lr_schedule(step, total, warmup, lr)
            opt.step()
            opt.zero_grad()
            step += 1
            for key, v in terms.items():
                sums[key] = sums.get(key, 0.0) + float(v) * len(idx)
        if on_epoch is not None:
            on_epoch(epoch, {key: v / n for key, v in sums.items()})
