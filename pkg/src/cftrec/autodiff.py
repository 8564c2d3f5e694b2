"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient to them. :func:`backward` visits the
reachable graph in reverse creation order, so the accumulation order (and the
resulting gradient bits) is fixed for a given graph.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from cftrec.errors import NumericError

_ids = itertools.count()
_state = {"grad": True, "debug": False}


def set_debug(enabled: bool) -> None:
    """When enabled, every op checks its output for NaN/inf."""
    _state["debug"] = bool(enabled)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        # float32 is kept for fast training runs; everything else becomes float64
        self.data = arr if arr.dtype == np.float32 else arr.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A leaf that always requires grad; ``grad`` is allocated up front."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], kind: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output from {kind}")
    node = Tensor(out)
    if _state["grad"] and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node._parents = tuple(parents)
        node._backward = backward
    return node


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``. ``owned`` means ``g`` is a fresh array nobody else holds."""
    if not t.requires_grad:
        return
    if t.grad is None:
        dt = t.data.dtype
        t.grad = g if owned and g.flags.writeable and g.dtype == dt else np.array(g, dtype=dt)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw, "scale")


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), bw, "sum")


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    k = math.sqrt(2.0 / math.pi)
    x2 = x * x
    th = x2 * (k * 0.044715)
    th += k
    th *= x
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) k (1 + 3c x^2)
        d = x2 * (3 * 0.044715 * k)
        d += k
        d *= x
        d *= 1.0 - th * th
        d += 1.0 + th
        d *= 0.5
        d *= g
        _accum(a, d, owned=True)

    return _make(out, (a,), bw, "gelu")


# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # [..., k] @ [k, n] as one 2-D GEMM rather than a loop of small ones
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, b.shape[1])
        if a.requires_grad:
            _accum(a, (g2 @ b.data.T).reshape(a.shape), owned=True)
        if b.requires_grad:
            _accum(b, a2.T @ g2, owned=True)

    return _make((a2 @ b.data).reshape(*lead, b.shape[1]), (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding ids out of range")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, gt)

    return _make(table.data[ids], (table,), bw, "embedding")


def take_positions(a, rows, cols) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` for a tensor of shape [B, T, ...]."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        _accum(a, ga)

    return _make(a.data[rows, cols], (a,), bw, "take_positions")


def masked_fill(a, mask, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast(a.data, mask, "masked_fill")
    out = np.where(mask, value, a.data)

    def bw(g):
        _accum(a, _unbroadcast(np.where(mask, 0.0, g), a.shape))

    return _make(out, (a,), bw, "masked_fill")


# normalisation and probabilities


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: scale/shift must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(
                x,
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)),
            )

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(a) -> Tensor:
    """Max-shifted softmax over the last axis."""
    a = as_tensor(a)
    y = _softmax_np(a.data)

    def bw(g):
        ga = g - (g * y).sum(axis=-1, keepdims=True)
        ga *= y
        _accum(a, ga, owned=True)

    return _make(y, (a,), bw, "softmax")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, weights=None) -> tuple[Tensor, float]:
    """Weighted sum over rows of ``-log softmax(logits)[target]``, and the weight sum.

    ``logits`` is [M, V]; the caller divides by the returned weight sum to
    get a weighted mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [M, V] logits, got {logits.shape}")
    m, v = logits.shape
    if targets.shape != (m,):
        raise ValueError(f"cross_entropy: {m} rows but targets of shape {targets.shape}")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise ValueError(f"cross_entropy: {m} rows but weights of shape {w.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError("cross_entropy target id out of range")
    logp = log_softmax_np(logits.data)
    rows = np.arange(m)
    nll = -logp[rows, targets].astype(np.float64)
    total = np.asarray(float(np.dot(w, nll)))

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        p *= (g * w).astype(p.dtype)[:, None]
        _accum(logits, p, owned=True)

    return _make(total, (logits,), bw, "cross_entropy"), float(w.sum())


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or when ``rate == 0``."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an RNG stream")
    keep = (rng.random(a.shape, dtype=np.float32) >= rate).astype(a.data.dtype)
    keep *= 1.0 / (1.0 - rate)

    def bw(g):
        _accum(a, g * keep)

    return _make(a.data * keep, (a,), bw, "dropout")


# graph traversal


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        order.append(node)
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in seen)
    order.sort(key=lambda n: n._id, reverse=True)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = _reachable(loss)
    for node in nodes:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None
    # drop closures so the graph can be collected
    for node in nodes:
        node._backward = None
        node._parents = ()


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    Samples ``n_coords`` coordinates across ``params`` (all of them when
    there are fewer). ``f`` must rebuild the graph on every call.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for flat in picks.tolist():
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = flat - offsets[k]
            view = params[k].data.reshape(-1)
            orig = view[idx]
            view[idx] = orig + eps
            up = f().item()
            view[idx] = orig - eps
            down = f().item()
            view[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[k].reshape(-1)[idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
