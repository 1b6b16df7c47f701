"""Reverse-mode automatic differentiation over dense numpy arrays.

A define-by-run tape: every op returns a `Tensor` that remembers its parents
and a closure propagating the adjoint. `backward` walks the graph once in
reverse topological order, so gradients are deterministic for a fixed graph.
Double precision is the default dtype; nothing here touches a GPU.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=np.float64) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=dtype)


class Tensor:
    """A node on the tape: a dense array plus its backward closure."""

    __slots__ = ("value", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape}, grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, op: str, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` to invert numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    # out-of-place: closures may hand us views shared with other adjoints
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and binary ops

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return _make(out, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return _make(out, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def bw(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(out, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value

    def bw(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / b.value**2, b.value.shape))

    return _make(out, "div", (a, b), bw)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = a.value**p

    def bw(g):
        _accum(a, g * p * a.value ** (p - 1.0))

    return _make(out, "pow", (a,), bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.value)

    def bw(g):
        _accum(a, g * out)

    return _make(out, "exp", (a,), bw)


def log(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.value)

    def bw(g):
        _accum(a, g / a.value)

    return _make(out, "log", (a,), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.value, 0.0)

    def bw(g):
        _accum(a, g * (a.value > 0.0))

    return _make(out, "relu", (a,), bw)


def softplus(a) -> Tensor:
    """Numerically stable softplus: max(x,0) + log1p(exp(-|x|))."""
    a = _wrap(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _accum(a, g / (1.0 + np.exp(-x)))

    return _make(out, "softplus", (a,), bw)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def bw(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _make(out, "matmul", (a, b), bw)


def matvec(a, v) -> Tensor:
    a, v = _wrap(a), _wrap(v)
    if a.value.ndim != 2 or v.value.ndim != 1:
        raise ValueError(f"matvec expects (2D, 1D), got {a.value.shape}, {v.value.shape}")
    if a.value.shape[1] != v.value.shape[0]:
        raise ValueError(f"matvec shape mismatch: {a.value.shape} @ {v.value.shape}")
    out = a.value @ v.value

    def bw(g):
        _accum(a, np.outer(g, v.value))
        _accum(v, a.value.T @ g)

    return _make(out, "matvec", (a, v), bw)


def dot(a, b) -> Tensor:
    return reduce_sum(mul(a, b))


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return _make(out, "sum", (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    n = a.value.size if axis is None else a.value.shape[axis]

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape) / n)

    return _make(out, "mean", (a,), bw)


def cumsum(a, axis: int) -> Tensor:
    a = _wrap(a)
    out = np.cumsum(a.value, axis=axis)

    def bw(g):
        _accum(a, np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

    return _make(out, "cumsum", (a,), bw)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make(out, "concat", tuple(parts), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.value.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.value.shape))

    return _make(out, "reshape", (a,), bw)


def take(a, idx) -> Tensor:
    """Indexing/slicing; backward scatter-adds into the source."""
    a = _wrap(a)
    out = a.value[idx]

    def bw(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _make(out, "slice", (a,), bw)


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the first two axes of an H x W x C array."""
    a = _wrap(a)
    width = ((pad, pad), (pad, pad)) + ((0, 0),) * (a.value.ndim - 2)
    out = np.pad(a.value, width)

    def bw(g):
        sl = (slice(pad, g.shape[0] - pad), slice(pad, g.shape[1] - pad))
        _accum(a, g[sl])

    return _make(out, "pad2d", (a,), bw)


# ---------------------------------------------------------------------------
# norms

_NORM_EPS = 1e-12


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = np.sqrt((a.value**2).sum(axis=axis, keepdims=True))
    safe = np.maximum(n, _NORM_EPS)

    def bw(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, g * a.value / safe)

    res = n if keepdims else np.squeeze(n, axis=axis)
    return _make(res, "l2norm", (a,), bw)


def normalize(a, axis: int = -1) -> Tensor:
    """Unit-normalize along `axis`; norms <= 1e-12 map to zero with zero grad."""
    a = _wrap(a)
    n = np.sqrt((a.value**2).sum(axis=axis, keepdims=True))
    degenerate = n <= _NORM_EPS
    safe = np.where(degenerate, 1.0, n)
    out = np.where(degenerate, 0.0, a.value / safe)

    def bw(g):
        # d(x/|x|) = (g - y (y.g)) / |x|, zero on degenerate rows
        ydotg = (out * g).sum(axis=axis, keepdims=True)
        ga = (g - out * ydotg) / safe
        _accum(a, np.where(degenerate, 0.0, ga))

    return _make(out, "normalize", (a,), bw)


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Tensor) -> None:
    """Accumulate gradients into every requires_grad ancestor of a scalar root."""
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameter storage and gradient verification

class ParamStore:
    """Ordered name -> flat array map for trainable parameters."""

    def __init__(self, rng_seed: int = 0):
        self.entries: dict[str, np.ndarray] = {}
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)

    def add(self, name: str, shape: tuple, init: str = "glorot", scale: float = 1.0) -> np.ndarray:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            arr = np.zeros(shape)
        elif init == "glorot":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arr = self._rng.uniform(-lim, lim, size=shape)
        elif init == "normal":
            arr = self._rng.normal(0.0, scale, size=shape)
        else:
            raise ValueError(f"unknown init: {init}")
        self.entries[name] = np.asarray(arr, dtype=np.float64)
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name, arr):
        self.entries[name] = np.asarray(arr, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self.entries)

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.entries.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.entries.values())

    def flat(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.entries.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        off = 0
        for k, v in self.entries.items():
            self.entries[k] = vec[off:off + v.size].reshape(v.shape).copy()
            off += v.size
        if off != vec.size:
            raise ValueError(f"flat vector size {vec.size} != param count {off}")

    def copy(self) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        out.entries = {k: v.copy() for k, v in self.entries.items()}
        return out


def collect_grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for k, t in leaves.items()}


def finite_diff_check(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                      params: ParamStore, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `loss_fn` maps leaf tensors (name -> Tensor) to a scalar Tensor and must be
    deterministic. Relative error denominator is max(|g_fd|, |g_ad|, 1e-8).
    """
    if step == 0:
        raise ValueError("finite-difference step must be nonzero")
    leaves = params.tensors()
    loss = loss_fn(leaves)
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite loss at base point")
    backward(loss)
    g_ad = collect_grads(leaves)

    base = params.flat()
    g_fd = np.zeros_like(base)
    probe = params.copy()
    for i in range(base.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            vec = base.copy()
            vec[i] += sign * step
            probe.load_flat(vec)
            with no_grad():
                val = float(loss_fn(probe.tensors()).value)
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite loss at coordinate {i}")
            if slot == 0:
                plus = val
            else:
                minus = val
        g_fd[i] = (plus - minus) / (2.0 * step)

    ad_flat = np.concatenate([g_ad[k].ravel() for k in params.entries]) if base.size else base
    denom = np.maximum(np.maximum(np.abs(g_fd), np.abs(ad_flat)), 1e-8)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(g_fd - ad_flat) / denom))
