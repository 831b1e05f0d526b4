"""Random gradient-check cases, one generator per differentiable primitive.

Each generator takes an RNG and returns ``(build, arrays)`` with freshly
drawn shapes, optionally followed by the factor relating the backward rule
to the true derivative (only gradient reversal has one other than 1);
:func:`oracles.check_gradient` does the rest.
"""

from __future__ import annotations

import numpy as np

from dsalab import tensor as T


def _shape(rng, lo=1, hi=4, ndim=None):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _bcast_partner(rng, shape):
    # drop leading dims and set some remaining ones to 1
    keep = int(rng.integers(0, len(shape) + 1))
    sub = list(shape[len(shape) - keep:])
    for i in range(len(sub)):
        if rng.random() < 0.4:
            sub[i] = 1
    return tuple(sub)


def case_add(rng):
    s = _shape(rng)
    return (lambda t: T.add(t[0], t[1])), [rng.standard_normal(s), rng.standard_normal(_bcast_partner(rng, s))]


def case_sub(rng):
    s = _shape(rng)
    return (lambda t: T.sub(t[0], t[1])), [rng.standard_normal(s), rng.standard_normal(_bcast_partner(rng, s))]


def case_mul(rng):
    s = _shape(rng)
    return (lambda t: T.mul(t[0], t[1])), [rng.standard_normal(s), rng.standard_normal(_bcast_partner(rng, s))]


def case_div(rng):
    s = _shape(rng)
    b = rng.uniform(0.5, 2.0, _bcast_partner(rng, s)) * rng.choice([-1, 1])
    return (lambda t: T.div(t[0], t[1])), [rng.standard_normal(s), b]


def case_neg(rng):
    return (lambda t: T.neg(t[0])), [rng.standard_normal(_shape(rng))]


def case_scale(rng):
    c = float(rng.standard_normal())
    return (lambda t: T.scale(t[0], c)), [rng.standard_normal(_shape(rng))]


def case_matmul(rng):
    batch = _shape(rng, ndim=int(rng.integers(0, 3))) if rng.random() < 0.7 else ()
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    a = rng.standard_normal(batch + (m, k))
    b = rng.standard_normal((batch if rng.random() < 0.5 else ()) + (k, n))
    return (lambda t: T.matmul(t[0], t[1])), [a, b]


def case_linear(rng):
    lead = _shape(rng, ndim=int(rng.integers(1, 3)))
    i, o = (int(v) for v in rng.integers(1, 5, size=2))
    return (lambda t: T.linear(t[0], t[1], t[2])), [rng.standard_normal(lead + (i,)),
                                                    rng.standard_normal((i, o)), rng.standard_normal(o)]


def case_reshape(rng):
    s = _shape(rng)
    return (lambda t: T.reshape(t[0], (-1,))), [rng.standard_normal(s)]


def case_transpose(rng):
    s = _shape(rng, ndim=int(rng.integers(2, 4)))
    axes = tuple(int(v) for v in rng.permutation(len(s)))
    return (lambda t: T.transpose(t[0], axes)), [rng.standard_normal(s)]


def case_index(rng):
    s = _shape(rng, lo=2, hi=4, ndim=2)
    r = int(rng.integers(0, s[0]))
    return (lambda t: T.index(t[0], (slice(None), slice(0, s[1] - 1)))[r]), [rng.standard_normal(s)]


def case_concat(rng):
    s = _shape(rng, ndim=2)
    ax = int(rng.integers(0, 2))
    s2 = list(s)
    s2[ax] = int(rng.integers(1, 4))
    return (lambda t: T.concat([t[0], t[1]], axis=ax)), [rng.standard_normal(s), rng.standard_normal(tuple(s2))]


def case_sum(rng):
    s = _shape(rng)
    ax = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
    keep = bool(rng.random() < 0.5)
    return (lambda t: T.sum(t[0], axis=ax, keepdims=keep)), [rng.standard_normal(s)]


def case_mean(rng):
    s = _shape(rng)
    ax = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
    keep = bool(rng.random() < 0.5)
    return (lambda t: T.mean(t[0], axis=ax, keepdims=keep)), [rng.standard_normal(s)]


def case_exp(rng):
    return (lambda t: T.exp(t[0])), [rng.standard_normal(_shape(rng))]


def case_log(rng):
    return (lambda t: T.log(t[0])), [rng.uniform(0.3, 3.0, _shape(rng))]


def case_sqrt(rng):
    return (lambda t: T.sqrt(t[0])), [rng.uniform(0.3, 3.0, _shape(rng))]


def case_minimum(rng):
    s = _shape(rng)
    x = rng.standard_normal(s)
    c = 0.1
    # keep every entry away from the kink
    x = np.where(np.abs(x - c) < 0.05, x + 0.2, x)
    return (lambda t: T.minimum(t[0], c)), [x]


def case_softmax(rng):
    return (lambda t: T.softmax(t[0])), [rng.standard_normal(_shape(rng)) * 2]


def case_gelu(rng):
    return (lambda t: T.gelu(t[0])), [rng.standard_normal(_shape(rng)) * 2]


def case_layer_norm(rng):
    s = _shape(rng, lo=3, hi=5)
    d = s[-1]
    return (lambda t: T.layer_norm(t[0], t[1], t[2], eps=1e-6)), [rng.standard_normal(s),
                                                                  rng.standard_normal(d), rng.standard_normal(d)]


def case_cross_entropy(rng):
    b, c = (int(v) for v in rng.integers(1, 5, size=2))
    c = max(c, 2)
    labels = rng.integers(0, c, size=b)
    red = str(rng.choice(["mean", "sum", "none"]))
    return (lambda t: T.cross_entropy(t[0], labels, red)), [rng.standard_normal((b, c)) * 2]


def case_l2norm(rng):
    s = _shape(rng)
    return (lambda t: T.l2norm(t[0], axis=-1)), [rng.standard_normal(s) + 0.5]


def case_grad_reverse(rng):
    # forward is the identity; the backward is -lam times its derivative
    lam = float(rng.uniform(0.5, 2.0))
    return (lambda t: T.grad_reverse(t[0], lam)), [rng.standard_normal(_shape(rng))], -lam


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}
