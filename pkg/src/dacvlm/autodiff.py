"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the primitives the vision-language model needs are provided. Every
operation records its inputs and a closure computing the vector-Jacobian
product; :func:`backward` walks the recorded graph in reverse topological
order and accumulates gradients into leaf tensors.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "DegenerateBatchError",
    "UsageError",
    "no_grad",
    "grad_enabled",
    "count_multiplies",
    "backward",
    "add",
    "mul",
    "matmul",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "conv2d",
    "cross_entropy",
    "embedding",
    "gather_rows",
    "interleave_rows",
    "select_rows",
    "reshape",
    "transpose",
    "concat",
    "rope",
    "numerical_gradient",
    "gradcheck",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on non-finite inputs where finite values are required."""


class DegenerateBatchError(ValueError):
    """Raised when a loss has no unmasked position to average over."""


class UsageError(RuntimeError):
    """Raised when the autodiff API is used incorrectly."""


_GRAD_ENABLED = True
_COUNTERS: list = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class MultiplyCounter:
    """Running count of scalar multiplies executed by matmul and conv2d."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


@contextlib.contextmanager
def count_multiplies() -> Iterator[MultiplyCounter]:
    """Instrument matmul/conv2d forward passes inside the block.

    >>> with count_multiplies() as c:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> c.count
    24
    """
    counter = MultiplyCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _count(n: int) -> None:
    for c in _COUNTERS:
        c.add(n)


class Tensor:
    """A float64 array that can take part in a differentiation graph.

    Parameters
    ----------
    data : array-like
        Values; copied into a C-contiguous float64 array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` for this leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return transpose(self, axes)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------
def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls (call ``zero_grad`` between
    optimizer steps).
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def fn_scalar(g):
            return (g * c,)

        return _node(a.data * c, (a,), fn_scalar, "scale")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _node(a.data * b.data, (a, b), fn, "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum()), (x,), fn, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def fn(g):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), (x,), fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn, "concat")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has exactly the same batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ between {a.shape} and {b.shape}")
    out = a.data @ b.data
    if _COUNTERS:
        _count(out.size * a.shape[-1])
    shared_b = b.ndim == 2

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared_b:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), fn, "matmul")


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------
def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis, optionally restricted to ``mask`` entries.

    ``mask`` is a boolean array broadcastable to ``x`` where True marks
    positions that take part; masked positions get probability 0.
    """
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _node(out, (x, gain, bias), fn, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from erf."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _node(out, (x,), fn, "gelu")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------
def conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Valid (unpadded) strided 2-D cross-correlation.

    ``x`` is ``C_in x H x W`` or ``B x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x k x k``.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks {x.shape} / {kernel.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    O, Ck, k, k2 = kernel.shape
    if Ck != C or k != k2:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if H < k or W < k or (H - k) % stride or (W - k) % stride:
        raise DimensionError(
            f"conv2d: input {H}x{W} does not tile with kernel {k} and stride {stride}"
        )
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    if stride == k:
        # non-overlapping windows: a pure reshape
        cols = (
            xd.reshape(B, C, Ho, k, Wo, k).transpose(0, 2, 4, 1, 3, 5).reshape(B * Ho * Wo, C * k * k)
        )
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    kmat = kernel.data.reshape(O, C * k * k)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if _COUNTERS:
        _count(B * Ho * Wo * O * C * k * k)

    def fn(g):
        gx = gk = None
        if not batched:
            g = g[None]
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(B, Ho, Wo, C, k, k)
            if stride == k:
                gxd = gcols.transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
            else:
                gxd = np.zeros_like(xd)
                for i in range(k):
                    for j in range(k):
                        gxd[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
            gx = np.ascontiguousarray(gxd if batched else gxd[0])
        return gx, gk

    return _node(out if batched else out[0], (x, kernel), fn, "conv2d")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------
def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is ``... x V``; ``targets`` and ``mask`` match the leading axes.
    """
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: {z.shape[0]} rows vs {t.shape[0]} targets")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape != t.shape:
        raise DimensionError("cross_entropy: mask length differs from targets")
    count = int(m.sum())
    if count == 0:
        raise DegenerateBatchError("cross_entropy: every position is masked")
    tm = t[m]
    if tm.min() < 0 or tm.max() >= V:
        raise DimensionError(f"cross_entropy: target id out of range [0, {V})")
    t_safe = np.where(m, t, 0)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    lse = (np.log(s) + zmax)[:, 0]
    picked = z[np.arange(z.shape[0]), t_safe]
    loss = float(((lse - picked) * m).sum() / count)

    def fn(g):
        p = e / s
        p[np.arange(z.shape[0]), t_safe] -= 1.0
        p *= (m / count)[:, None] * g
        return (p.reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), fn, "cross_entropy")


# ---------------------------------------------------------------------------
# Indexing primitives
# ---------------------------------------------------------------------------
def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DimensionError(f"embedding: ids outside [0, {V})")

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), fn, "embedding")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows ``x[idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    unique = idx.size == np.unique(idx).size

    def fn(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], (x,), fn, "gather_rows")


def interleave_rows(parts: Sequence[Tensor], indices: Sequence[np.ndarray], n: int) -> Tensor:
    """Scatter ``parts[i]`` into rows ``indices[i]`` of an ``n``-row result.

    The index lists must partition ``range(n)``.
    """
    parts = tuple(parts)
    indices = [np.asarray(i, dtype=np.int64) for i in indices]
    if len(parts) != len(indices):
        raise DimensionError("interleave_rows: parts and index lists differ in number")
    covered = np.zeros(n, dtype=np.int64)
    for p, idx in zip(parts, indices):
        if p.shape[0] != idx.size:
            raise DimensionError(f"interleave_rows: {p.shape[0]} rows for {idx.size} indices")
        np.add.at(covered, idx, 1)
    if not (covered == 1).all():
        raise DimensionError("interleave_rows: index lists do not partition the output rows")
    tail = parts[0].shape[1:]
    out = np.empty((n,) + tail)
    for p, idx in zip(parts, indices):
        out[idx] = p.data

    def fn(g):
        return tuple(g[idx] for idx in indices)

    return _node(out, parts, fn, "interleave_rows")


def select_rows(choice, options: Sequence[Tensor]) -> Tensor:
    """Row-wise choice: ``out[i] = options[choice[i]][i]``."""
    choice = np.asarray(choice, dtype=np.int64)
    options = tuple(options)
    shape = options[0].shape
    for o in options:
        if o.shape != shape:
            raise DimensionError("select_rows: options differ in shape")
    if choice.shape != shape[:1]:
        raise DimensionError("select_rows: choice length differs from rows")
    pick = [(choice == j) for j in range(len(options))]
    out = np.zeros(shape)
    for j, o in enumerate(options):
        out[pick[j]] = o.data[pick[j]]

    def fn(g):
        grads = []
        for j in range(len(options)):
            gj = np.zeros(shape)
            gj[pick[j]] = g[pick[j]]
            grads.append(gj)
        return tuple(grads)

    return _node(out, options, fn, "select_rows")


def _rotate_half(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([-a[..., h:], a[..., :h]], axis=-1)


def _rotate_half_t(a: np.ndarray) -> np.ndarray:
    h = a.shape[-1] // 2
    return np.concatenate([a[..., h:], -a[..., :h]], axis=-1)


def rope_tables(positions, dim: int, base: float = 10000.0):
    """cos/sin tables of shape ``len(positions) x dim`` for rotary embedding."""
    if dim % 2:
        raise DimensionError(f"rotary embedding needs an even head dim, got {dim}")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on ``... x n x dk`` (rotate-half layout)."""
    cos, sin = rope_tables(positions, x.shape[-1], base)
    if cos.shape[0] != x.shape[-2]:
        raise DimensionError(f"rope: {cos.shape[0]} positions for sequence length {x.shape[-2]}")
    out = x.data * cos + _rotate_half(x.data) * sin

    def fn(g):
        return (g * cos + _rotate_half_t(g * sin),)

    return _node(out, (x,), fn, "rope")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------
def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backward and central differences.

    The error for each input is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max magnitudes (floored at 1e-8).
    """
    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    out = fn(*inputs)
    backward(out)
    worst = 0.0
    for t in inputs:
        with no_grad():
            num = numerical_gradient(lambda: float(fn(*inputs).data), t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / scale))
    return worst
