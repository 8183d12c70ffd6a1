"""A small reverse-mode differentiation engine over dense float64 numpy arrays.

Only the operations the encoder and decoder need are provided. Shapes must
match exactly; the only implicit broadcast is against Python scalars. Bias
addition over rows is the explicit :func:`add_bias` op.

Usage::

    with Tape() as tape:
        y = ad.sigmoid(ad.matmul(x, w))
        loss = ad.mse(y, target)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

PROB_EPS = 1e-7
BN_EPS = 1e-7

_active_tape: contextvars.ContextVar = contextvars.ContextVar("unigraph_tape", default=None)


class ShapeError(ValueError):
    pass


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this scalar into every ``requires_grad`` leaf."""
        _run_backward(self, _topological(self))

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scalar_mul(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scalar_mul(self, -1.0), other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return elementwise_pow(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations in execution order; ``backward`` replays them in reverse.

    Execution order is already a topological order, so every recorded node is
    visited exactly once. Tapes are not thread-safe; use one per thread.
    """

    def __init__(self):
        self.nodes: list = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, t: Tensor):
        self.nodes.append(t)

    def backward(self, loss: Tensor):
        _run_backward(loss, self.nodes)


def _topological(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(loss: Tensor, order: Sequence[Tensor]):
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, gp in zip(node._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape = _active_tape.get()
        if tape is not None:
            tape.record(out)
    return out


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + float(c), (a,), lambda g: (g,))


def add_bias(x, b) -> Tensor:
    """Add a length-k vector to every row of an ``(..., k)`` tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def elementwise_pow(x, p: int) -> Tensor:
    x = as_tensor(x)
    if int(p) != p or p < 1:
        raise ValueError(f"elementwise_pow needs a positive integer power, got {p!r}")
    p = int(p)
    if p == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        other = t.shape[:ax] + t.shape[ax + 1:]
        if t.ndim != ts[0].ndim or other != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def sum(x, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), back)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scalar_mul(sum(x, axis), 1.0 / count)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def matmul(a, b) -> Tensor:
    """Matrix product; 3-d operands are batched over a shared leading axis."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def bilinear(zl, w, zr) -> Tensor:
    """All pairwise bilinear scores ``zl_i^T W zr_j`` as a matrix."""
    return matmul(matmul(zl, w), transpose(zr))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (batch, classes), got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), back)


# losses

def bce(p, target, weight=None) -> Tensor:
    """Binary cross entropy of probabilities against 0/1 (or soft) targets.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the gradient is zero where
    the clamp is active. Without ``weight`` the mean is returned, otherwise the
    ``weight``-weighted sum.
    """
    p = as_tensor(p)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce: shape mismatch {p.shape} vs {t.shape}")
    w = np.full(p.shape, 1.0 / p.data.size) if weight is None else np.asarray(weight, dtype=np.float64)
    if w.shape != p.shape:
        raise ShapeError(f"bce: weight shape mismatch {p.shape} vs {w.shape}")
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)
    val = -np.sum(w * (t * np.log(pc) + (1.0 - t) * np.log1p(-pc)))

    def back(g):
        return (g * w * inside * (pc - t) / (pc * (1.0 - pc)),)

    return _make(val, (p,), back)


def mse(pred, target, weight=None) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {t.shape}")
    w = np.full(pred.shape, 1.0 / pred.data.size) if weight is None else np.asarray(weight, dtype=np.float64)
    diff = pred.data - t
    return _make(np.sum(w * diff * diff), (pred,), lambda g: (g * 2.0 * w * diff,))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {y.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(y))
    val = np.mean(logsum - z[rows, y])
    probs = np.exp(z - logsum[:, None])

    def back(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        return (g * d / len(y),)

    return _make(val, (logits,), back)


# regularizers

def dropout(x, rate: float, rng, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``; identity when not training."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    if not isinstance(rng, np.random.Generator):
        from .graph import make_rng
        rng = make_rng(rng)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


class RunningStats:
    """Per-channel running mean/variance for :func:`batch_norm`."""

    def __init__(self, width: int, momentum: float = 0.9):
        self.mean = np.zeros(width)
        self.var = np.ones(width)
        self.momentum = momentum

    def update(self, mean, var):
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * mean
        self.var = m * self.var + (1.0 - m) * var


def batch_norm(x, gamma, beta, stats: RunningStats, train: bool, mask=None) -> Tensor:
    """Normalize each column of a 2-d tensor over its (masked) rows.

    Rows with ``mask == 0`` are excluded from the statistics and come out as zero.
    In training mode batch statistics are used and ``stats`` is updated; in eval
    mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    m = np.ones(x.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64)
    mcol = m[:, None]
    count = m.sum()
    if train:
        if count < 1:
            raise ValueError("batch_norm needs at least one unmasked row in training mode")
        mu = (x.data * mcol).sum(axis=0) / count
        centered = (x.data - mu) * mcol
        var = (centered ** 2).sum(axis=0) / count
        stats.update(mu, var)
    else:
        mu, var = stats.mean, stats.var
        centered = (x.data - mu) * mcol
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centered * inv
    out = (xhat * gamma.data + beta.data) * mcol

    def back(g):
        g = g * mcol
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if train:
            dx = inv / count * (count * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            dx = dx * mcol
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), back)


# verification

def grad_check(f: Callable, x, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called with no
    arguments and must read the tensors' current data. The error per
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = [x] if isinstance(x, Tensor) else list(x)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        for idx in np.ndindex(*p.shape):
            old = p.data[idx]
            p.data[idx] = old + eps
            up = f().item()
            p.data[idx] = old - eps
            down = f().item()
            p.data[idx] = old
            num = (up - down) / (2.0 * eps)
            worst = max(worst, abs(analytic[idx] - num) / max(1.0, abs(num)))
    return worst
