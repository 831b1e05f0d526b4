"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every primitive produces a new :class:`Tensor`. When at least one input is
tracked (a ``requires_grad`` leaf or the output of a recorded op) and
recording is enabled, the op is appended to the module tape together with
its backward rule. :func:`backward` sweeps the tape in reverse once and
writes ``.grad`` on every tracked leaf reachable from the loss.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "TapeError",
    "tensor", "no_grad", "backward", "grad", "tape_size", "reset_tape",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "linear", "reshape",
    "transpose", "index", "concat", "sum", "mean", "exp", "log", "sqrt",
    "minimum", "softmax", "gelu", "layer_norm", "cross_entropy", "l2norm",
    "grad_reverse",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tracked", "_is_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tracked = requires_grad
        self._is_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __getitem__ = lambda a, key: index(a, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction catches any nan/inf element
    if arr.size and not math.isfinite(float(arr.sum())):
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# tape


class _Tape:
    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.outputs: set[int] = set()
        self.enabled = True

    def record(self, out, parents, fn):
        self.entries.append((out, parents, fn))
        self.outputs.add(id(out))

    def clear(self):
        self.entries.clear()
        self.outputs.clear()


_TAPE = _Tape()


def tape_size() -> int:
    return len(_TAPE.entries)


def reset_tape() -> None:
    """Drop every recorded op (e.g. after a forward that will never be differentiated)."""
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, name: str,
            check: bool = True) -> Tensor:
    # ops that cannot turn finite inputs into inf/nan pass check=False
    if check:
        _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._is_op = True
    out._tracked = False
    if _TAPE.enabled:
        for p in parents:
            if p._tracked:
                out._tracked = True
                _TAPE.record(out, parents, fn)
                break
    return out


def _sweep(loss: Tensor) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._tracked:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._is_op and id(loss) not in _TAPE.outputs:
        raise TapeError("loss is not on the tape; backward was already run for this forward")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if not loss._is_op:
        leaves[id(loss)] = loss
    for out, parents, fn in reversed(_TAPE.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p._tracked:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
            if not p._is_op:
                leaves[key] = p
    return grads, leaves


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` (accumulating) on every tracked leaf and consume the tape."""
    grads, leaves = _sweep(loss)
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    _TAPE.clear()


def grad(loss: Tensor, wrt: Sequence[Tensor], retain: bool = True) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching ``.grad``.

    With ``retain=True`` the tape is kept so further losses from the same
    forward can be differentiated.
    """
    grads, _ = _sweep(loss)
    out = [grads[id(w)] if id(w) in grads else np.zeros_like(w.data) for w in wrt]
    if not retain:
        _TAPE.clear()
    return out


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add", check=False)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub", check=False)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a._tracked else None,
                _unbroadcast(g * ad, bd.shape) if b._tracked else None)
    return _result(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("div: division by zero")
    out = ad / bd

    def fn(g):
        return (_unbroadcast(g / bd, ad.shape) if a._tracked else None,
                _unbroadcast(-g * out / bd, bd.shape) if b._tracked else None)
    return _result(out, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg", check=False)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        # BLAS needs contiguous operands; broadcast views from sum/mean are not
        g = np.ascontiguousarray(g)
        if bd.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a._tracked:
                ga = _unbroadcast((g2 @ bd.T).reshape(g.shape[:-1] + (bd.shape[0],)), ad.shape)
            if b._tracked:
                gb = np.ascontiguousarray(ad).reshape(-1, ad.shape[-1]).T @ g2
                if ad.ndim == 1:
                    gb = gb.reshape(bd.shape)
            return ga, gb
        if a._tracked:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b._tracked:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _result(ad @ bd, (a, b), fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for x (..., k), weight (k, m), bias (m,), as one op."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {weight.shape} are not aligned")
    parents = (x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != weight.shape[1:]:
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        parents = parents + (bias,)
    xd, wd = x.data, weight.data
    k, m = wd.shape
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (m,))

    def fn(g):
        g2 = np.ascontiguousarray(g).reshape(-1, m)
        gx = (g2 @ wd.T).reshape(xd.shape) if x._tracked else None
        gw = x2.T @ g2 if weight._tracked else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias._tracked else None)
    return _result(out, parents, fn, "linear")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape", check=False)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose", check=False)


def index(a, key) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    keys = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (list, np.ndarray)) for k in keys)

    def fn(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)
    return _result(np.array(a.data[key]), (a,), fn, "index", check=False)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(out, ts, fn, "concat", check=False)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)
    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), fn, "mean")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("sqrt: non-positive input has no finite derivative")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def minimum(a, c: float) -> Tensor:
    """Elementwise ``min(a, c)`` against a constant; gradient is zero where clamped."""
    a = _as_tensor(a)
    keep = a.data < c
    return _result(np.where(keep, a.data, c), (a,), lambda g: (g * keep,), "minimum", check=False)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"softmax: needs a non-empty last axis, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _result(y, (a,), fn, "softmax", check=False)


def gelu(a) -> Tensor:
    """GeLU in its tanh form, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)

    deriv = []

    def fn(g):
        # the local derivative is reused when several losses share one forward
        if not deriv:
            x2 = x * x
            d = 1.0 - t * t
            d *= 0.5 * _GELU_C
            d *= x + (3 * 0.044715) * x2 * x
            d += 0.5 * (1.0 + t)
            deriv.append(d)
        return (g * deriv[0],)
    return _result(0.5 * x * (1.0 + t), (a,), fn, "gelu", check=False)


def layer_norm(a, scale=None, shift=None, eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean and unit variance.

    ``scale`` and ``shift`` (last-axis vectors) apply the usual affine part in
    the same op.
    """
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    if scale is None:
        def fn(g):
            return (inv * (g - g.mean(axis=-1, keepdims=True)
                           - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)
        return _result(xhat, (a,), fn, "layer_norm", check=False)

    scale, shift = _as_tensor(scale), _as_tensor(shift)
    if scale.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: scale {scale.shape} / shift {shift.shape} vs input {x.shape}")
    sd = scale.data
    lead = tuple(range(x.ndim - 1))

    def fn_affine(g):
        gs = (g * xhat).sum(axis=lead) if scale._tracked else None
        gb = g.sum(axis=lead) if shift._tracked else None
        gx = None
        if a._tracked:
            gh = g * sd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gs, gb
    return _result(xhat * sd + shift.data, (a, scale, shift), fn_affine, "layer_norm")


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis of ``logits`` (B, C) with integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    per = -logp[rows, labels]

    def onehot_diff():
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return d

    if reduction == "none":
        return _result(per, (logits,), lambda g: (onehot_diff() * g[:, None],), "cross_entropy")
    if reduction == "sum":
        return _result(np.asarray(per.sum()), (logits,),
                       lambda g: (onehot_diff() * g,), "cross_entropy")
    if reduction == "mean":
        return _result(np.asarray(per.mean()), (logits,),
                       lambda g: (onehot_diff() * (g / n),), "cross_entropy")
    raise ValueError(f"unknown reduction {reduction!r}")


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as zero."""
    a = _as_tensor(a)
    x = a.data
    nrm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.where(nrm > 0, nrm, 1.0)
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.where(nrm > 0, x / safe, 0.0),)
    return _result(out, (a,), fn, "l2norm")


def grad_reverse(a, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    a = _as_tensor(a)
    lam = float(lam)
    return _result(a.data, (a,), lambda g: (-lam * g,), "grad_reverse", check=False)
