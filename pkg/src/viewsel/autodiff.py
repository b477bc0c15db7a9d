"""Reverse-mode automatic differentiation over numpy arrays.

Small on purpose: just the ops the fusion model needs. Executed ops append
their output tensor to a per-thread tape; backward() walks the tape in
reverse execution order (which is a valid topological order), carrying
intermediate flows in a dict keyed by tensor identity and folding results
into the persistent .grad of requires_grad leaves only. One backward call
therefore adds each leaf's gradient exactly once, and calling backward twice
without zeroing doubles the leaf gradients.

The tape and the grad-enabled flag are thread-local so that search workers
can train independent candidates concurrently and evaluation can fan out
predictions without the threads splicing into each other's graphs.

Every op checks its output for NaN/Inf and raises NumericError naming the op,
so divergence surfaces where it happens rather than three layers later.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DeterminismError, NumericError, ShapeError, ValidationError


class _EngineState(threading.local):
    # threading.local runs __init__ once per thread on first touch
    def __init__(self):
        self.tape: list[Tensor] = []
        self.grad_enabled = True


_STATE = _EngineState()


class Tape:
    """Scope for recorded ops; leaving the scope frees them."""

    def __enter__(self):
        self._mark = len(_STATE.tape)
        return self

    def __exit__(self, *exc):
        del _STATE.tape[self._mark :]
        return False


class no_grad:
    """Disable recording entirely; forwards become plain numpy."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named, grouped, trainable leaf tensor.

    group selects the learning rate during optimization: the regression head
    trains faster than the fusion trunk.
    """

    __slots__ = ("name", "group", "tensor")

    def __init__(self, name: str, group: str, data, dtype=np.float32):
        if group not in ("fusion", "head"):
            raise ValidationError(f"unknown parameter group {group!r}")
        self.name = name
        self.group = group
        self.tensor = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = value

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, group={self.group}, shape={self.data.shape})"


def _check_finite(op: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _needs_grad(parents) -> bool:
    for p in parents:
        if isinstance(p, Tensor) and (p.requires_grad or p._vjp is not None):
            return True
    return False


def _result(op: str, data: np.ndarray, parents: tuple, vjp: Callable | None) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._op = op
    if _STATE.grad_enabled and vjp is not None and _needs_grad(parents):
        out._parents = parents
        out._vjp = vjp
        _STATE.tape.append(out)
    else:
        out._parents = ()
        out._vjp = None
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _coerce(b, a)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _result("mul", ad * bd, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = a.data.dtype.type(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs operands with ndim >= 2, got {a.data.ndim} and {b.data.ndim}"
        )
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return (ga, gb)

    return _result("matmul", np.matmul(ad, bd), (a, b), vjp)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result("absolute", np.abs(a.data), (a,), lambda g: (g * sign,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _result("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _result(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; the backward scatter-adds duplicates."""
    idx = np.asarray(indices)
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result("take_rows", a.data[idx], (a,), vjp)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[0] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _result(
        "concat_rows", np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), vjp
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    if eps <= 0:
        raise ValidationError(f"layer_norm eps must be > 0, got {eps}")
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.data.shape)
        dbeta = _unbroadcast(g, beta.data.shape)
        gx = g * gd
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (x,), vjp)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x for x > 0, slope * x otherwise; slope broadcasts over leading axes."""
    pos = x.data > 0
    sd = slope.data
    out = np.where(pos, x.data, sd * x.data)
    xd = x.data

    def vjp(g):
        gx = np.where(pos, g, g * sd)
        gs = _unbroadcast(np.where(pos, np.zeros_like(g), g * xd), sd.shape)
        return (gx, gs)

    return _result("prelu", out.astype(x.data.dtype, copy=False), (x, slope), vjp)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted-scaling dropout. Identity (same object) when inactive.

    Kept activations are scaled by 1/(1-rate) so evaluation needs no
    rescaling.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout with rate > 0 in train mode needs an rng")
    keep = rng.random(x.data.shape) >= rate
    coef = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - rate))
    return _result("dropout", x.data * coef, (x,), lambda g: (g * coef,))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    seed_flow = np.ones_like(loss.data)
    if loss._vjp is None:
        if loss.requires_grad:
            loss.grad += seed_flow
        return
    flows: dict[int, np.ndarray] = {id(loss): seed_flow}
    for t in reversed(_STATE.tape):
        flow = flows.pop(id(t), None)
        if flow is None:
            continue
        for parent, pflow in zip(t._parents, t._vjp(flow)):
            if pflow is None or not isinstance(parent, Tensor):
                continue
            if parent._vjp is None:
                if parent.requires_grad:
                    parent.grad += pflow
            else:
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pflow
                else:
                    flows[key] = pflow


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    f must rebuild its forward from the leaves' current .data on every call
    and be deterministic; determinism is verified bit-for-bit before probing.
    Relative error uses |a - n| / max(1, |a|, |n|). Run leaves in double
    precision; float32 rounding swamps the comparison otherwise.
    """
    with Tape():
        first = f().data.copy()
    with Tape():
        second = f().data.copy()
    if first.tobytes() != second.tobytes():
        raise DeterminismError("grad_check forward is not deterministic under repeats")

    for leaf in leaves:
        leaf.zero_grad()
    with Tape():
        out = f()
        backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    for leaf, an in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        an_flat = an.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with Tape(), no_grad():
                fp = float(f().data.reshape(-1)[0])
            flat[j] = orig - eps
            with Tape(), no_grad():
                fm = float(f().data.reshape(-1)[0])
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(1.0, abs(float(an_flat[j])), abs(numeric))
            worst = max(worst, abs(float(an_flat[j]) - numeric) / denom)
    return worst
