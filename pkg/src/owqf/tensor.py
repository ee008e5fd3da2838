"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation whose inputs require gradients appends a node to the active
:class:`Tape`.  Nodes land in execution order, so the tape is already
topologically sorted and ``Tape.backward`` simply replays it in reverse.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad.tolist()
    [[2.0, 4.0]]
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, inputs, output, backward):
        self.nodes.append(Node(inputs, output, backward))

    def backward(self, loss: "Tensor", grad=None):
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is not None and isinstance(t, Tensor) and t.requires_grad:
                    t._accumulate(gi)

    def clear(self):
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_state = _State()


def active_tape() -> Tape:
    return _state.stack[-1] if _state.stack else _state.default


class no_grad:
    """Context manager that disables recording."""

    def __enter__(self):
        self._prev = _state.enabled
        _state.enabled = False

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        tape.record(tuple(inputs), out, backward)
        out._tape = tape
    return out


def op(data, inputs: Sequence["Tensor"], backward: Callable) -> "Tensor":
    """Record a custom operation; ``backward(g)`` returns one gradient per input."""
    return _make(np.asarray(data, dtype=DTYPE), tuple(inputs), backward)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # --- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def _accumulate(self, g):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.data.shape:
            g = np.broadcast_to(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def backward(self, grad=None):
        tape = self._tape if self._tape is not None else active_tape()
        tape.backward(self, grad)
        if tape is _state.default:
            tape.clear()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # --- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return _make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return _make(a.data ** p, (a,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.intp)

        fancy = _is_fancy(idx)

        def bw(g):
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return _make(a.data[idx], (a,), bw)

    # --- shape -------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # --- elementwise -------------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""
    d = x.data
    y = np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))
    return _make(y, (x,), lambda g: (g * _sigmoid(-d),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _make(x.data * m, (x,), lambda g: (g * m,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)

    return _make(np.maximum(a.data, b.data), (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)

    return _make(np.minimum(a.data, b.data), (a, b), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilized softmax.

    ``mask`` (boolean, True = blocked) sets logits to -inf.  Rows with every
    entry blocked come out as zeros, not NaN.
    """
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis, shape {x.shape}")
    d = x.data
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        d = np.where(mask, -np.inf, d)
    m = np.max(d, axis=axis, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.exp(d - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gain.shape}, {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = x @ weight
    return y + bias if bias is not None else y


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None, weights=None,
                         fused: bool = True) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    ``weights`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors (any
    object with those attributes also works); ``None`` means identity
    projections with zero bias.  ``mask[i, j]`` True blocks query i from key j.
    ``fused=False`` builds the same computation from elementary tape ops.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    lq, d = q.shape
    lk = k.shape[0]
    if d % heads:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    if k.shape[1] != d or v.shape != (lk, d):
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        if mask.shape != (lq, lk):
            raise ShapeError(f"mask shape {mask.shape} != {(lq, lk)}")
    w = _weights(weights)
    if w is not None:
        q = linear(q, w["wq"], w["bq"])
        k = linear(k, w["wk"], w["bk"])
        v = linear(v, w["wv"], w["bv"])
    out = attention_core(q, k, v, heads, mask) if fused else _attention_composite(q, k, v, heads, mask)
    if w is not None:
        out = linear(out, w["wo"], w["bo"])
    return out


def _attention_composite(q, k, v, heads, mask):
    lq, d = q.shape
    lk = k.shape[0]
    dh = d // heads
    qh = q.reshape(lq, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(lk, heads, dh).transpose(1, 2, 0)
    vh = v.reshape(lk, heads, dh).transpose(1, 0, 2)
    logits = (qh @ kh) * (1.0 / np.sqrt(dh))
    attn = softmax(logits, axis=-1, mask=None if mask is None else np.broadcast_to(mask, logits.shape))
    return (attn @ vh).transpose(1, 0, 2).reshape(lq, d)


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Projection-free multi-head scaled dot-product attention as one tape node."""
    lq, d = q.shape
    lk = k.shape[0]
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(lq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(lk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(lk, heads, dh).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    if mask is not None:
        logits = np.where(mask[None], -np.inf, logits)
    m = logits.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    attn = e / np.where(z == 0.0, 1.0, z)
    out = (attn @ vh).transpose(1, 0, 2).reshape(lq, d)

    def bw(g):
        gh = g.reshape(lq, heads, dh).transpose(1, 0, 2)
        ga = gh @ vh.transpose(0, 2, 1)
        gv = attn.transpose(0, 2, 1) @ gh
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh
        back = lambda x, n: x.transpose(1, 0, 2).reshape(n, d)  # noqa: E731
        return back(gq, lq), back(gk, lk), back(gv, lk)

    return _make(out, (q, k, v), bw)


def _weights(weights):
    if weights is None:
        return None
    if isinstance(weights, dict):
        return weights
    return {n: getattr(weights, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` takes no arguments and reads the current values of ``params``; the
    parameters are perturbed in place and restored.  ``max_coords`` caps the
    coordinates probed per parameter (a seeded random subset).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite function value")
    tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f().data.sum())
            flat[i] = orig - h
            with no_grad():
                fm = float(f().data.sum())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite value while perturbing coordinate {i}")
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            if not np.isfinite(a):
                raise NumericError(f"non-finite analytic gradient at coordinate {i}")
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
