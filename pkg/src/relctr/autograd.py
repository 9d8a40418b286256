"""Small dense-tensor library with reverse-mode gradients.

Everything is float64 numpy underneath. A ``Tensor`` remembers the tensors it
was computed from and a closure that pushes its gradient back to them;
``backward`` walks that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class TapeError(RuntimeError):
    """Raised when the recorded graph cannot be differentiated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, metric passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- plumbing ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: _accumulate(a, 2.0 * g * a.data))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo) elementwise; gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: _accumulate(a, g * mask))


def relu(a) -> Tensor:
    return clamp_min(a, 0.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form keeps exp() arguments non-positive
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); exact to rounding for x > 30
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """log(1 + e^a), overflow-safe, gradient sigmoid(a)."""
    a = as_tensor(a)
    out = _np_softplus(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * _np_sigmoid(a.data)))


def softplus_scalar(v: float) -> float:
    return float(_np_softplus(np.array(v, dtype=DTYPE)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), bw)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where mask else ``b``; mask is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(np.where(mask, a.data, b.data), (a, b), bw)


# -- shape ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: _accumulate(a, np.swapaxes(g, i, j)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(a.data[idx], (a,), bw)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, full)

    return _make(table.data[ids], (table,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _make(out, ts, bw)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes instead of summing B outer products
                k = a.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


# -- normalisation and probability ---------------------------------------


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; masked-out entries get exactly zero weight.

    Rows whose mask is entirely False come out as all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _make(out, (a,), bw)


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {m.shape}")
    return softmax(m, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        _accumulate(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - xhat * gx))

    out = _make(xhat, (a,), bw)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# -- attention ------------------------------------------------------------


class EmptySequenceError(ValueError):
    """Target attention was asked to pool over zero keys."""


def target_attention(q, K, V, d: int) -> Tensor:
    """softmax(q K^T / sqrt(d)) V for a single query row.

    q is 1 x d, K is n x d, V is n x dv. Raises on n == 0; the caller owns
    the fallback.
    """
    q, K, V = as_tensor(q), as_tensor(K), as_tensor(V)
    if K.shape[0] == 0:
        raise EmptySequenceError("target attention over an empty key sequence")
    if K.shape[0] != V.shape[0] or q.shape[-1] != K.shape[-1]:
        raise ValueError(f"inconsistent widths q{q.shape} K{K.shape} V{V.shape}")
    if d <= 0:
        raise ValueError("d must be positive")
    scores = matmul(q, K.T) * (1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), V)


def masked_target_attention(q, K, V, mask: np.ndarray, d: int) -> Tensor:
    """Batched target attention.

    q: B x da, K: B x n x da, V: B x n x dv, mask: B x n booleans.
    Rows with no valid key return zeros; callers substitute a fallback.
    """
    q, K, V = as_tensor(q), as_tensor(K), as_tensor(V)
    B = q.shape[0]
    scores = matmul(reshape(q, (B, 1, q.shape[-1])), K.T) * (1.0 / math.sqrt(d))
    w = softmax(scores, axis=-1, mask=np.asarray(mask, dtype=bool)[:, None, :])
    out = matmul(w, V)
    return reshape(out, (B, V.shape[-1]))


# -- losses ---------------------------------------------------------------


def mse(a, b) -> Tensor:
    """Mean squared error, mean over every element."""
    diff = sub(a, b)
    return tmean(square(diff))


def cross_entropy(probs, labels) -> Tensor:
    """Mean negative log-probability of the target class.

    ``probs`` is N x C (rows are distributions); ``labels`` are 0-based ints.
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    picked = getitem(probs, (np.arange(len(labels)), labels))
    return neg(tmean(log(picked)))


def cross_entropy_logits(logits, labels) -> Tensor:
    """Cross-entropy computed through log-softmax (stable for training)."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    return neg(tmean(getitem(lp, (np.arange(len(labels)), labels))))


def bce(p, y, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 labels."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=DTYPE)
    pc = p.data
    lo = np.clip(pc, eps, 1.0 - eps)
    out = -(y * np.log(lo) + (1.0 - y) * np.log(1.0 - lo)).mean()

    def bw(g):
        _accumulate(p, g * (lo - y) / (lo * (1.0 - lo)) / y.size)

    return _make(np.asarray(out), (p,), bw)


# -- backward -------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise TapeError("cycle detected in gradient tape")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise TapeError("cycle detected in gradient tape")
            if ps is None and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Gradients land on ``.grad`` of every leaf and are also returned keyed by
    tensor. Parameters the loss does not touch get an exact zero array.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    for p in params:
        p.grad = None
    if loss.requires_grad:
        order = _topological(loss)
        for node in order:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior grads are not needed afterwards
    grads = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads[p] = p.grad
    return grads


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``p``."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * step)
    return g


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
              atol: float = 1e-8) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Entries where both gradients are below ``atol`` in magnitude count as exact.
    """
    loss = fn()
    analytic = backward(loss, params)
    worst = 0.0
    for p in params:
        a = analytic[p].copy()
        n = numeric_grad(fn, p, step)
        denom = np.maximum(np.abs(a), np.abs(n))
        err = np.where(denom > atol, np.abs(a - n) / np.maximum(denom, atol), 0.0)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
