"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`.  When any input tracks gradients the
result remembers its parents and a backward closure; :func:`backward` walks
that graph in reverse topological order.  Leaf gradients accumulate across
calls until :meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from fsar import kernels
from fsar.errors import ContractError, DimensionError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation paths)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _BranchTape:
    def __init__(self):
        self.choices: list[np.ndarray] = []
        self.cursor = 0
        self.replaying = False


@contextmanager
def frozen_branches():
    """Record every piecewise branch choice, then replay it on later passes.

    Inside the block the first forward pass records relu masks, clamp and
    norm-floor masks and arg-min indices; call ``replay()`` on the yielded
    handle to make subsequent passes reuse them.  Replayed passes evaluate the
    smooth extension of the recorded piece, so finite differences never
    straddle a kink.
    """
    tape = _BranchTape()
    prev = getattr(_state, "branches", None)
    _state.branches = tape
    try:
        yield tape
    finally:
        _state.branches = prev


def _branch(choice: np.ndarray) -> np.ndarray:
    tape = getattr(_state, "branches", None)
    if tape is None:
        return choice
    if not tape.replaying:
        tape.choices.append(choice)
        return choice
    if tape.cursor >= len(tape.choices):
        raise ContractError("replayed pass has more branch points than the recorded one")
    rec = tape.choices[tape.cursor]
    tape.cursor += 1
    if rec.shape != choice.shape:
        raise ContractError(f"replayed branch shape {choice.shape} != recorded {rec.shape}")
    return rec


def replay(tape: _BranchTape) -> None:
    """Rewind ``tape`` so the next pass reuses the recorded choices."""
    tape.replaying = True
    tape.cursor = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def _raise_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, float(c))


def relu(x: Tensor) -> Tensor:
    mask = _branch(x.data > 0)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * g * d,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; gradient flows only where ``x > floor``."""
    keep = _branch(x.data > floor)
    return _make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def norm(x: Tensor, axis: int = -1, floor: float = 1e-12, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` floored at ``floor``; zero gradient below the floor."""
    ax = _norm_axes(axis, x.ndim)[0]
    d = x.data
    raw = np.sqrt((d * d).sum(axis=ax, keepdims=True))
    live = _branch(raw > floor)
    out = np.where(live, raw, floor)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, ax)
        return (np.where(live, g / np.where(live, raw, 1.0), 0.0) * d,)

    return _make(out if keepdims else out.squeeze(ax), (x,), bw)


# ----------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand_back(g: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out, dtype=np.float64), (x,),
                 lambda g: (np.broadcast_to(_expand_back(g, axes, keepdims), shape).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    shape = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out, dtype=np.float64), (x,),
                 lambda g: (np.broadcast_to(_expand_back(g, axes, keepdims) / n, shape).copy(),))


avg_pool = mean


def min_(x: Tensor, axis: int) -> Tensor:
    """Hard minimum along one axis; the gradient goes to the first arg-min."""
    ax = _norm_axes(axis, x.ndim)[0]
    idx = _branch(np.argmin(x.data, axis=ax))
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if not axes else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ContractError("concat of an empty list")
    ax = _norm_axes(axis, xs[0].ndim)[0]
    try:
        out = np.concatenate([t.data for t in xs], axis=ax)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {ax}") from None
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], dtype=np.float64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    shape = x.shape

    def bw(g):
        g = g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul batch axes do not broadcast: {a.shape} x {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-10) -> Tensor:
    """Normalise the last axis to mean 0 / variance 1, then apply ``gamma, beta``."""
    d = x.data
    n = d.shape[-1]
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        if gamma.shape != (n,):
            raise DimensionError(f"layer_norm gamma shape {gamma.shape} != ({n},)")
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        if beta.shape != (n,):
            raise DimensionError(f"layer_norm beta shape {beta.shape} != ({n},)")
        out = out + beta.data
        parents.append(beta)
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, kh, kw]``; ``b`` is an optional ``[C_out]`` bias.
    """
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d expects input rank 3/4 and kernel rank 4, got {x.shape}, {w.shape}")
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    co, ci, kh, kw = w.shape
    if ci != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d stride {stride} / padding {padding} invalid")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d kernel {w.shape} larger than padded input {x.shape} (pad {padding})")
    if b is not None and b.shape != (co,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({co},)")
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    P = oh * ow
    cols = kernels.im2col(xd, kh, kw, stride, padding)          # [ci*kh*kw, B*P]
    wm = w.data.reshape(co, ci * kh * kw)
    out2 = np.matmul(wm, cols)                                   # [co, B*P]
    if b is not None:
        out2 += b.data[:, None]
    out = np.ascontiguousarray(out2.reshape(co, B, oh, ow).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, B * P)
        gw = np.matmul(g2, cols.T).reshape(w.shape)
        gx = kernels.col2im(np.matmul(wm.T, g2), B, C, H, W, kh, kw, stride, padding)
        if squeeze:
            gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, parents, bw)


# ----------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every tracked leaf.

    Repeated calls add to existing leaf gradients; reset with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any gradient-tracked tensor")
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
