"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the model trains with flows through this module: a `Tensor`
wraps a float64 ndarray plus an optional gradient buffer, and every
operation that participates in training records a backward closure.
Fused ops (softmax, log-softmax, layer norm, LSTM) carry hand-derived
backwards; `gradcheck` verifies all of them against finite differences.

Tensors are treated as immutable once produced by an operation. Ops on
inputs that do not require gradients build no graph, so inference on a
frozen model allocates nothing beyond the forward values.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A float64 array with an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph mechanics ---------------------------------------------------

    def backward(self, grad=None):
        """Reverse-mode sweep from this node.

        `grad` defaults to ones, which is the usual seed for a scalar loss.
        Gradients accumulate into every reachable tensor with
        `requires_grad` set.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap `data`; attach the graph only if some parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / y)

    return _make(y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _make(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))

    return _make(y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        _accumulate(a, g * keep)

    return _make(np.where(keep, a.data, 0.0), (a,), backward)


# -- reductions and shape ops -------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg / n, a.data.shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def slice_(a: Tensor, key) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _make(a.data[key].copy(), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` for an id array of any shape (embedding)."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accumulate(table, full)

    return _make(table.data[ids], (table,), backward)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select one entry per row along the last axis; `idx` has a.shape[:-1]."""
    idx = np.asarray(idx)
    expanded = np.expand_dims(idx, -1)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        _accumulate(a, full)

    return _make(np.take_along_axis(a.data, expanded, axis=-1).squeeze(-1), (a,), backward)


# -- fused neural ops ---------------------------------------------------------


def masked_softmax(logits: Tensor, allow=None) -> Tensor:
    """Softmax over the last axis with optional boolean key mask.

    Disallowed entries are -inf before the max-subtracted exponential, so
    they come out exactly zero. A row with no allowed key has no valid
    softmax and raises.
    """
    x = logits.data
    if allow is not None:
        allow = np.broadcast_to(np.asarray(allow, dtype=bool), x.shape)
        if not allow.any(axis=-1).all():
            raise ValueError("degenerate attention row: all keys masked")
        x = np.where(allow, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("degenerate attention row: all keys masked")
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(logits, (g - dot) * y)

    return _make(y, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    y = s - lse

    def backward(g):
        soft = np.exp(y)
        _accumulate(logits, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(y, (logits,), backward)


def layer_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (pre-affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (g - gm - y * gym))

    return _make(y, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), backward)


def lstm_direction(seq: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """One LSTM direction over [B, T, D] -> [B, T, K], fused over time.

    Gates are packed i|f|g|o in the 4K parameter axis. The backward pass is
    hand-rolled truncated-nowhere BPTT; gradcheck covers it. `reverse`
    runs right-to-left and returns outputs aligned to the original order.
    """
    x = seq.data
    bsz, steps, _ = x.shape
    k = wh.data.shape[0]
    order = range(steps - 1, -1, -1) if reverse else range(steps)

    h = np.zeros((bsz, k))
    c = np.zeros((bsz, k))
    xs_w = x @ wx.data + b.data
    cache = []
    out = np.zeros((bsz, steps, k))
    for t in order:
        z = xs_w[:, t] + h @ wh.data
        i = 1.0 / (1.0 + np.exp(-z[:, :k]))
        f = 1.0 / (1.0 + np.exp(-z[:, k : 2 * k]))
        g_ = np.tanh(z[:, 2 * k : 3 * k])
        o = 1.0 / (1.0 + np.exp(-z[:, 3 * k :]))
        c_prev = c
        h_prev = h
        c = f * c_prev + i * g_
        tc = np.tanh(c)
        h = o * tc
        out[:, t] = h
        cache.append((t, i, f, g_, o, c_prev, h_prev, tc))

    def backward(gout):
        d_wx = np.zeros_like(wx.data)
        d_wh = np.zeros_like(wh.data)
        d_b = np.zeros_like(b.data)
        d_x = np.zeros_like(x)
        dh_next = np.zeros((bsz, k))
        dc_next = np.zeros((bsz, k))
        for t, i, f, g_, o, c_prev, h_prev, tc in reversed(cache):
            dh = gout[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g_
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g_ * g_),
                    do * o * (1.0 - o),
                ],
                axis=-1,
            )
            d_wx += x[:, t].T @ dz
            d_wh += h_prev.T @ dz
            d_b += dz.sum(axis=0)
            d_x[:, t] = dz @ wx.data.T
            dh_next = dz @ wh.data.T
        _accumulate(seq, d_x)
        _accumulate(wx, d_wx)
        _accumulate(wh, d_wh)
        _accumulate(b, d_b)

    return _make(out, (seq, wx, wh, b), backward)


def assert_finite(t: Tensor, context: str = "tensor"):
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"non-finite values in {context}")
    return t
