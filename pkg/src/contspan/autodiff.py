"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every primitive records a backward closure on
the output tensor, and ``backward()`` walks the recorded graph in reverse
topological order. Everything is backed by numpy arrays; no other state.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

# When True, every primitive asserts its output is finite. Cheap enough at
# desk scale to leave on in tests, off by default in training loops.
CHECK_FINITE = False

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is allocated lazily as a zero array for ``requires_grad``
    tensors; ``backward()`` accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_inputs", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through module-level primitives
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*inputs: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in inputs)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor(data)
    if backward is not None and _tracked(*inputs):
        out._backward = backward
        out._inputs = inputs
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g, _a=a, _b=b):
        yield _a, _unbroadcast(g, _a.data.shape)
        yield _b, _unbroadcast(g, _b.data.shape)

    return _make(data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g, _a=a, _b=b):
        yield _a, _unbroadcast(g, _a.data.shape)
        yield _b, _unbroadcast(-g, _b.data.shape)

    return _make(data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g, _a=a, _b=b):
        yield _a, _unbroadcast(g * _b.data, _a.data.shape)
        yield _b, _unbroadcast(g * _a.data, _b.data.shape)

    return _make(data, "mul", (a, b), bw)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bw(g, _a=a):
        yield _a, 2.0 * g * _a.data

    return _make(data, "square", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast as in ``np.matmul``."""
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ValueError(f"matmul requires at least 1-d operands, got shapes "
                         f"{a.data.shape} and {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}") from e

    def bw(g, _a=a, _b=b):
        ad, bd = _a.data, _b.data
        if ad.ndim == 1 and bd.ndim == 1:
            yield _a, g * bd
            yield _b, g * ad
            return
        if bd.ndim == 1:
            yield _a, _unbroadcast(g[..., None] * bd, ad.shape)
            gb = (np.swapaxes(ad, -1, -2) @ g[..., None])[..., 0]
            yield _b, _unbroadcast(gb, bd.shape)
            return
        if ad.ndim == 1:
            yield _a, _unbroadcast((g[..., None, :] @ np.swapaxes(bd, -1, -2))[..., 0, :],
                                   ad.shape)
            yield _b, _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            return
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        yield _a, _unbroadcast(ga, ad.shape)
        yield _b, _unbroadcast(gb, bd.shape)

    return _make(data, "matmul", (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g, _a=a):
        yield _a, g.reshape(_a.data.shape)

    return _make(data, "reshape", (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g, _a=a, _inv=tuple(inv)):
        yield _a, np.transpose(g, _inv)

    return _make(data, "transpose", (a,), bw)


def index(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bw(g, _a=a, _idx=idx):
        full = np.zeros_like(_a.data)
        np.add.at(full, _idx, g)
        yield _a, full

    return _make(data, "index", (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape ids.shape + (h,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(f"embedding: id out of range for table with "
                         f"{table.data.shape[0]} rows")
    data = table.data[ids]

    def bw(g, _t=table, _ids=ids):
        full = np.zeros_like(_t.data)
        np.add.at(full, _ids.reshape(-1), g.reshape(-1, _t.data.shape[1]))
        yield _t, full

    return _make(data, "embedding", (table,), bw)


def gelu(a: Tensor) -> Tensor:
    """Smooth gated activation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)  # x**3 via np.power is slow
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bw(g, _a=a, _t=t):
        x = _a.data
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        yield _a, g * (0.5 * (1.0 + _t) + 0.5 * x * (1.0 - _t * _t) * d_inner)

    return _make(data, "gelu", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g, _a=a, _y=data):
        yield _a, g * _y * (1.0 - _y)

    return _make(data, "sigmoid", (a,), bw)


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; ``floor`` clamps the argument from below first.

    Where the clamp is active the gradient is zero.
    """
    x = np.maximum(a.data, floor) if floor > 0.0 else a.data
    data = np.log(x)

    def bw(g, _a=a, _x=x, _floor=floor):
        grad = g / _x
        if _floor > 0.0:
            grad = np.where(_a.data >= _floor, grad, 0.0)
        yield _a, grad

    return _make(data, "log", (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g, _a=a, _y=data):
        yield _a, g * _y

    return _make(data, "exp", (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g, _a=a, _y=data):
        dot = (g * _y).sum(axis=-1, keepdims=True)
        yield _a, _y * (g - dot)

    return _make(data, "softmax", (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse

    def bw(g, _a=a, _ls=data):
        sm = np.exp(_ls)
        yield _a, g - sm * g.sum(axis=-1, keepdims=True)

    return _make(data, "log_softmax", (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat * gain.data + bias.data

    def bw(g, _a=a, _gain=gain, _bias=bias, _xhat=xhat, _inv=inv):
        n = _a.data.shape[-1]
        gx = g * _gain.data
        dx = _inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - _xhat * (gx * _xhat).mean(axis=-1, keepdims=True))
        yield _a, dx
        red = tuple(range(g.ndim - 1))
        yield _gain, (g * _xhat).sum(axis=red)
        yield _bias, g.sum(axis=red)

    return _make(data, "layer_norm", (a, gain, bias), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bw(g, _a=a, _axis=axis):
        if _axis is None:
            yield _a, np.broadcast_to(g, _a.data.shape).copy()
        else:
            yield _a, np.broadcast_to(np.expand_dims(g, _axis), _a.data.shape).copy()

    return _make(data, "sum", (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    data = a.data.mean(axis=axis)
    denom = a.data.size if axis is None else a.data.shape[axis]

    def bw(g, _a=a, _axis=axis, _d=denom):
        if _axis is None:
            yield _a, np.broadcast_to(g / _d, _a.data.shape).copy()
        else:
            yield _a, np.broadcast_to(np.expand_dims(g, _axis), _a.data.shape) / _d

    return _make(data, "mean", (a,), bw)


def squared_difference(a: Tensor, b: Tensor) -> Tensor:
    diff = a.data - b.data
    data = diff * diff

    def bw(g, _a=a, _b=b, _diff=diff):
        yield _a, _unbroadcast(2.0 * g * _diff, _a.data.shape)
        yield _b, _unbroadcast(-2.0 * g * _diff, _b.data.shape)

    return _make(data, "squared_difference", (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, _ts=tuple(tensors), _off=offsets, _axis=axis):
        for i, t in enumerate(_ts):
            sl = [slice(None)] * g.ndim
            sl[_axis] = slice(_off[i], _off[i + 1])
            yield t, g[tuple(sl)]

    return _make(data, "concat", tuple(tensors), bw)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[b] = a[b, idx[b]] for a 2-d input; used for gold-index picks."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bw(g, _a=a, _rows=rows, _idx=idx):
        full = np.zeros_like(_a.data)
        np.add.at(full, (_rows, _idx), g)
        yield _a, full

    return _make(data, "take_along_last", (a,), bw)


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Tensor):
    """Populate ``grad`` on every reachable requires_grad leaf.

    ``root`` must be scalar. Grads accumulate, so call ``zero_grad`` on the
    parameters first if a fresh pass is wanted.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if id(inp) not in visited:
                stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for inp, gin in node._backward(g):
            if CHECK_FINITE and not np.all(np.isfinite(gin)):
                raise FloatingPointError(f"non-finite gradient through op {node._op!r}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin


# ---------------------------------------------------------------------------
# numeric checking and rng

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``x``. A NaN anywhere
    is reported as ``inf`` so callers treat it as a failure.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        return float("inf")
    backward(out)
    analytic = probe.grad.copy().reshape(-1)

    flat = x.data.copy().reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(Tensor(bumped.reshape(x.data.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Tensor(bumped.reshape(x.data.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        return float("inf")
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def seeded_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic PCG64 stream; extra ints derive independent substreams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Standard Adam over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
