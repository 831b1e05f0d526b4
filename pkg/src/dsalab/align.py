"""Discrepancy measures between the attention maps of a clean and a perturbed input.

Every measure compares vectors along the last axis and sums over the
leading ones:

* ``mse``: half the L2 distance,
* ``kl``:  KL divergence ``KL(A_x || A_x')``, smoothed by ``EPS`` inside
  the logarithm,
* ``at``:  half the L2 distance between L2-normalized vectors.

The ``*_np`` functions work on plain arrays and are the reference used in
tests. :func:`alignment_loss` is the differentiable version used in
training. By default each example's maps of all layers and heads form one
vector (``unit="map"``); ``unit="row"`` compares every attention row (one
query position in one head of one layer) separately and sums. Either way
the result is averaged over the batch.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

EPS = 1e-8
METRICS = ("mse", "kl", "at")
ROW_SETS = ("all", "cls", "patches")
UNITS = ("map", "row")


def _check_pair(a, b) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"attention maps differ in shape: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# reference (numpy) forms; rows along the last axis


def d_mse_np(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_pair(a, b)
    return 0.5 * float(np.linalg.norm(a - b, axis=-1).sum())


def d_kl_np(a: np.ndarray, b: np.ndarray, eps: float = EPS) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_pair(a, b)
    return float((a * (np.log(a + eps) - np.log(b + eps))).sum())


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("d_at: attention row with zero norm")
    return a / n


def d_at_np(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_pair(a, b)
    return 0.5 * float(np.linalg.norm(_unit_rows(a) - _unit_rows(b), axis=-1).sum())


# ---------------------------------------------------------------------------
# differentiable forms; return one value per leading batch entry


def _batch_sum(x: Tensor) -> Tensor:
    # (B, ...) -> (B,)
    return x.reshape((x.shape[0], -1)).sum(axis=1)


def d_mse(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b)
    return T.scale(_batch_sum(T.l2norm(a - b, axis=-1)), 0.5)


def d_kl(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    _check_pair(a, b)
    return _batch_sum(a * (T.log(a + eps) - T.log(b + eps)))


def _unit(a: Tensor) -> Tensor:
    n = T.l2norm(a, axis=-1, keepdims=True)
    if np.any(n.data == 0):
        raise ValueError("d_at: attention row with zero norm")
    return a / n


def d_at(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b)
    return T.scale(_batch_sum(T.l2norm(_unit(a) - _unit(b), axis=-1)), 0.5)


_DISTANCES = {"mse": d_mse, "kl": d_kl, "at": d_at}


def _rows(a: Tensor, rows: str) -> Tensor:
    # a: (B, heads, N, N); rows are query positions (axis 2)
    if rows == "all":
        return a
    if rows == "cls":
        return a[:, :, 0:1, :]
    if rows == "patches":
        return a[:, :, 1:, :]
    raise ValueError(f"rows must be one of {ROW_SETS}, got {rows!r}")


def alignment_per_example(attn_x: Sequence[Tensor], attn_xp: Sequence[Tensor],
                          metric: str = "at", rows: str = "all", unit: str = "map") -> Tensor:
    """Per-example discrepancy (B,).

    With ``unit="map"`` the chosen rows of every layer and head are flattened
    into one vector per example and compared once (for ``at`` this
    normalizes the whole map). With ``unit="row"`` every (layer, head, row)
    slice is compared on its own and the results are summed.
    """
    if metric not in _DISTANCES:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
    if len(attn_x) != len(attn_xp) or not attn_x:
        raise ShapeError(f"layer count mismatch: {len(attn_x)} vs {len(attn_xp)}")
    dist = _DISTANCES[metric]
    if unit == "map":
        flat = lambda maps: T.concat([_rows(a, rows).reshape((a.shape[0], -1)) for a in maps], axis=1)
        fx, fxp = flat(attn_x), flat(attn_xp)
        _check_pair(fx, fxp)
        return dist(fx, fxp)
    total = None
    for a, b in zip(attn_x, attn_xp):
        d = dist(_rows(a, rows), _rows(b, rows))
        total = d if total is None else total + d
    return total


def alignment_loss(attn_x: Sequence[Tensor], attn_xp: Sequence[Tensor],
                   metric: str = "at", rows: str = "all", weights=None, unit: str = "map") -> Tensor:
    """Batch-mean alignment loss; gradients flow into both sets of maps.

    ``weights`` (B,) optionally zeroes the contribution of individual examples
    (used for pairs whose perturbed copy is just the clean image).
    """
    per = alignment_per_example(attn_x, attn_xp, metric, rows, unit)
    if weights is not None:
        per = per * np.asarray(weights, dtype=float)
    return per.mean()
