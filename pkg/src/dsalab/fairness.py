"""Group confusion counts and the fairness / utility metrics reported per model.

Conventions follow the reporting tables these metrics are used in:

* ``DP  = TPR[s=1] - TPR[s=0]`` (a true-positive-rate gap, *not* the usual
  positive-prediction-rate gap),
* ``EO  = 1/2 (TPR[1] - TPR[0]) + 1/2 (FPR[1] - FPR[0])``,
* ``BA  = 1/4 (TPR[0] + TNR[0] + TPR[1] + TNR[1])``,
* ``DBA = 1/2 (TPR[1] + TNR[1]) - 1/2 (TPR[0] + TNR[0])``.

A rate whose denominator is zero is undefined; every metric that needs it
returns an :class:`Undefined` value instead of a number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Undefined:
    reason: str

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"Undefined({self.reason!r})"


@dataclass(frozen=True)
class GroupCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def tpr(self):
        d = self.tp + self.fn
        return self.tp / d if d else Undefined("no positives")

    def fpr(self):
        d = self.fp + self.tn
        return self.fp / d if d else Undefined("no negatives")

    def tnr(self):
        d = self.tn + self.fp
        return self.tn / d if d else Undefined("no negatives")


@dataclass(frozen=True)
class GroupConfusion:
    """Confusion counts for sensitive groups s=0 (``g0``) and s=1 (``g1``)."""

    g0: GroupCounts
    g1: GroupCounts

    def group(self, s: int) -> GroupCounts:
        return self.g1 if s else self.g0

    @property
    def total(self) -> int:
        return self.g0.total + self.g1.total

    def swapped(self) -> "GroupConfusion":
        return GroupConfusion(self.g1, self.g0)


def _binary(name: str, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.size and not np.isin(v, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return v.astype(np.int64)


def confusion(predictions, y, s) -> GroupConfusion:
    predictions, y, s = (_binary(n, v) for n, v in (("predictions", predictions), ("y", y), ("s", s)))
    if not (len(predictions) == len(y) == len(s)):
        raise ValueError(f"length mismatch: predictions {len(predictions)}, y {len(y)}, s {len(s)}")
    groups = []
    for g in (0, 1):
        m = s == g
        p, t = predictions[m], y[m]
        groups.append(GroupCounts(
            tp=int(np.sum((p == 1) & (t == 1))), fp=int(np.sum((p == 1) & (t == 0))),
            tn=int(np.sum((p == 0) & (t == 0))), fn=int(np.sum((p == 0) & (t == 1)))))
    return GroupConfusion(*groups)


def _first_undefined(*vals):
    return next((v for v in vals if isinstance(v, Undefined)), None)


def demographic_parity(c: GroupConfusion):
    t1, t0 = c.g1.tpr(), c.g0.tpr()
    bad = _first_undefined(t1, t0)
    return bad if bad is not None else t1 - t0


def equalized_odds(c: GroupConfusion):
    t1, t0, f1, f0 = c.g1.tpr(), c.g0.tpr(), c.g1.fpr(), c.g0.fpr()
    bad = _first_undefined(t1, t0, f1, f0)
    return bad if bad is not None else 0.5 * (t1 - t0) + 0.5 * (f1 - f0)


def balanced_accuracy(c: GroupConfusion):
    rates = (c.g0.tpr(), c.g0.tnr(), c.g1.tpr(), c.g1.tnr())
    bad = _first_undefined(*rates)
    return bad if bad is not None else 0.25 * (rates[0] + rates[1] + rates[2] + rates[3])


def dba(c: GroupConfusion):
    t1, n1, t0, n0 = c.g1.tpr(), c.g1.tnr(), c.g0.tpr(), c.g0.tnr()
    bad = _first_undefined(t1, n1, t0, n0)
    return bad if bad is not None else 0.5 * (t1 + n1) - 0.5 * (t0 + n0)


def accuracy(c: GroupConfusion):
    n = c.total
    return (c.g0.tp + c.g0.tn + c.g1.tp + c.g1.tn) / n if n else Undefined("no examples")


def _abs(v):
    return v if isinstance(v, Undefined) else abs(v)


@dataclass(frozen=True)
class FairnessReport:
    dp: object
    eo: object
    dba: object
    ba: object
    acc: object
    tpr: tuple
    fpr: tuple
    tnr: tuple
    confusion: GroupConfusion = field(repr=False)

    @property
    def abs_dp(self):
        return _abs(self.dp)

    @property
    def abs_eo(self):
        return _abs(self.eo)

    @property
    def abs_dba(self):
        return _abs(self.dba)

    @property
    def delta_tpr(self):
        return self.abs_dp

    def as_dict(self) -> dict:
        """JSON-friendly view; undefined values become ``None``."""
        def num(v):
            return None if isinstance(v, Undefined) else float(v)
        return {
            "EO": num(self.eo), "DP": num(self.dp), "DBA": num(self.dba),
            "abs_EO": num(self.abs_eo), "abs_DP": num(self.abs_dp), "abs_DBA": num(self.abs_dba),
            "BA": num(self.ba), "ACC": num(self.acc),
            "TPR_s0": num(self.tpr[0]), "TPR_s1": num(self.tpr[1]),
            "FPR_s0": num(self.fpr[0]), "FPR_s1": num(self.fpr[1]),
            "TNR_s0": num(self.tnr[0]), "TNR_s1": num(self.tnr[1]),
            "delta_TPR": num(self.delta_tpr),
        }


def report(c: GroupConfusion) -> FairnessReport:
    return FairnessReport(
        dp=demographic_parity(c), eo=equalized_odds(c), dba=dba(c),
        ba=balanced_accuracy(c), acc=accuracy(c),
        tpr=(c.g0.tpr(), c.g1.tpr()), fpr=(c.g0.fpr(), c.g1.fpr()), tnr=(c.g0.tnr(), c.g1.tnr()),
        confusion=c,
    )


def evaluate_predictions(predictions, y, s) -> FairnessReport:
    return report(confusion(predictions, y, s))
