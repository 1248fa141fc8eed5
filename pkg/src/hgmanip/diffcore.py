"""A small reverse-mode autodiff engine over numpy arrays.

Tensors are float32 by default (see :func:`precision` for float64 gradient
checks). Every forward op records a closure that pushes its output gradient
back to its inputs; :func:`backward` walks the recorded graph in reverse
topological order. All reductions run in numpy's fixed order, so identical
inputs give bitwise-identical forward and backward results.
"""
from __future__ import annotations

import contextlib
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import HGMError

# per-thread so evaluator worker threads cannot clobber each other's settings
_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch this thread's default tensor dtype (float64 for finite-difference checks)."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise HGMError("non-finite", f"{op} produced NaN/Inf")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=default_dtype())
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)
    return _make(x.data * mask, (x,), bw, "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        _accum(x, g * s * (1.0 + x.data * (1.0 - s)))
    return _make(x.data * s, (x,), bw, "silu")


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise HGMError("shape-mismatch", f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims: one GEMM instead of a batched one plus a reduction
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    return _make(out, (a, b), bw, "matmul")


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise HGMError("shape-mismatch", f"affine {x.shape} x {W.shape}")
    if b is not None and as_tensor(b).shape != (W.shape[1],):
        raise HGMError("shape-mismatch", f"bias {as_tensor(b).shape} for {W.shape}")
    y = matmul(x, W)
    return y if b is None else add(y, b)


# ------------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))
    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))
    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, part)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))
    return _make(np.broadcast_to(x.data, tuple(shape)).copy(), (x,), bw, "broadcast")


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))
    return _make(np.sum(x.data), (x,), bw, "sum")


def mean(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis]

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.shape))
    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)
    return _make(np.take_along_axis(x.data, idx, axis=axis).squeeze(axis), (x,), bw, "max")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=default_dtype())
    diff = pred.data - target
    n = diff.size

    def bw(g):
        _accum(pred, g * 2.0 * diff / n)
    return _make(np.mean(diff * diff), (pred,), bw, "mse")


# ------------------------------------------------------------ normalisation etc.

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        _accum(x, y * (g - np.sum(g * y, axis=axis, keepdims=True)))
    return _make(y, (x,), bw, "softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            _accum(x, inv * (gh - gh.mean(axis=-1, keepdims=True)
                             - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def cross_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                    W_out: Tensor | None = None, b_out: Tensor | None = None,
                    return_weights: bool = False):
    """Multi-head scaled dot-product attention of query rows over key/value rows.

    Shapes: q (..., Nq, d), k and v (..., Nk, d). Per head h the output is
    ``softmax(q_h k_h^T / sqrt(d/h)) v_h``; heads are concatenated and passed
    through the output affine map (skipped when ``W_out`` is None).
    """
    d = q.shape[-1]
    if d % heads:
        raise HGMError("head-split", f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise HGMError("shape-mismatch", f"q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // heads
    lead = q.shape[:-2]

    def split(t):
        n = t.shape[-2]
        t = reshape(t, (*lead, n, heads, dh))
        nd = len(lead)
        return transpose(t, (*range(nd), nd + 1, nd, nd + 2))  # (..., h, n, dh)

    qh, kh, vh = split(q), split(k), split(v)
    nd = len(lead)
    scores = mul(matmul(qh, transpose(kh, (*range(nd + 1), nd + 2, nd + 1))), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh)  # (..., h, Nq, dh)
    out = transpose(out, (*range(nd), nd + 1, nd, nd + 2))
    out = reshape(out, (*lead, q.shape[-2], d))
    if W_out is not None:
        out = affine(out, W_out, b_out)
    return (out, weights) if return_weights else out


# -------------------------------------------------------------------- backward

def backward(loss: Tensor, store: "ParameterStore | None" = None) -> None:
    """Populate ``.grad`` of every tensor reachable from the scalar ``loss``.

    When a store is given, parameters the loss does not reach receive zeros.
    """
    if loss.data.size != 1:
        raise HGMError("non-scalar-loss", f"loss has shape {loss.shape}")
    if store is not None:
        store.zero_grad()
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # free intermediate gradients; parameters keep theirs
                node.grad = None if node is not loss else node.grad
    if store is not None:
        for p in store.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ------------------------------------------------------------ parameters/AdamW

class ParameterStore:
    """Named parameters with their gradients and AdamW moments."""

    def __init__(self, seed: int = 0):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise HGMError("duplicate-parameter", name)
        t = Tensor(np.asarray(value, dtype=default_dtype()).copy(), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def uniform(self, name: str, shape: Sequence[int], bound: float) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=tuple(shape)))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


class Ema:
    """Exponential moving average of a store's parameters with a warm-up decay.

    decay(k) = min(max_decay, 1 - (1 + k)^-power) for the k-th update (k from 0),
    so the first update copies the weights and the average lengthens as training goes.
    """

    def __init__(self, store: ParameterStore, power: float = 0.75, max_decay: float = 0.9999):
        self.store, self.power, self.max_decay = store, power, max_decay
        self.shadow = {k: p.data.copy() for k, p in store.params.items()}
        self.updates = 0

    def decay(self, k: int) -> float:
        return 0.0 if k <= 0 else min(self.max_decay, 1.0 - (1.0 + k) ** -self.power)

    def update(self) -> None:
        d = self.decay(self.updates)
        for k, p in self.store.params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.data
        self.updates += 1

    def copy_to_store(self) -> None:
        for k, p in self.store.params.items():
            p.data = self.shadow[k].astype(p.data.dtype, copy=True)


def adamw_step(store: ParameterStore, lr: float, betas=(0.95, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-6) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        m, v = store.m[name], store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    peak_lr: float = 1e-4
    warmup_steps: int = 500


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero at ``total_steps``."""
    w, total, peak = schedule.warmup_steps, schedule.total_steps, schedule.peak_lr
    if step < w:
        return peak * step / w
    if total <= w:
        return peak if step <= w else 0.0
    frac = min(1.0, (step - w) / (total - w))
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


# ----------------------------------------------------------------- small layers

class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, zero: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        if zero:
            self.W = store.add(f"{name}.W", np.zeros((d_in, d_out)))
            self.b = store.add(f"{name}.b", np.zeros(d_out))
        else:
            self.W = store.uniform(f"{name}.W", (d_in, d_out), bound)
            self.b = store.uniform(f"{name}.b", (d_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.W, self.b)


class MLP:
    """Linear layers with SiLU between them (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, widths: Sequence[int], zero_last: bool = False):
        self.layers = [
            Linear(store, f"{name}.{i}", widths[i], widths[i + 1],
                   zero=zero_last and i == len(widths) - 2)
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = silu(x)
        return x


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class CrossAttentionBlock:
    """Input projections, multi-head cross-attention and output projection."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int):
        if dim % heads:
            raise HGMError("head-split", f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(store, f"{name}.q", dim, dim)
        self.k = Linear(store, f"{name}.k", dim, dim)
        self.v = Linear(store, f"{name}.v", dim, dim)
        self.out = Linear(store, f"{name}.out", dim, dim)

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        return cross_attention(self.q(query), self.k(context), self.v(context), self.heads,
                               self.out.W, self.out.b)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
