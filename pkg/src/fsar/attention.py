"""Joint image/instance spatial-temporal attention and global token fusion.

Token layouts:
  spatial  ``f^S``  [B, T, HW, C]   attention mixes the HW tokens of one frame
  temporal ``f^T``  [B, HW, T, C]   attention mixes the T tokens of one location
  fused    ``f^ST`` [B, T, C]       both pooled over HW and summed
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar import tensor as T
from fsar.errors import DimensionError
from fsar.nn import LayerNorm, Linear, Module
from fsar.tensor import Tensor

LN_EPS = 1e-5


class MultiHeadAttention(Module):
    """Pre-norm multi-head attention with a residual: ``x + W_o · Attn(norm(x))``.

    When ``context`` is given the keys and values come from ``norm_kv(context)``
    (cross-attention); otherwise it is self-attention.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, cross: bool = False):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.norm = LayerNorm(dim, LN_EPS)
        if cross:
            self.norm_kv = LayerNorm(dim, LN_EPS)
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim
        self.last_attn: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        lead, L = x.shape[:-2], x.shape[-2]
        x = T.reshape(x, lead + (L, self.heads, self.dim // self.heads))
        n = x.ndim
        return T.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        return mha(x, self, context)


def mha(x: Tensor, p: MultiHeadAttention, context: Tensor | None = None) -> Tensor:
    if x.ndim < 2 or x.shape[-1] != p.dim:
        raise DimensionError(f"mha expects [..., L, {p.dim}], got {x.shape}")
    h = p.norm(x)
    if context is None:
        kv = h
    else:
        if context.shape[:-2] != x.shape[:-2] or context.shape[-1] != p.dim:
            raise DimensionError(f"cross-attention context {context.shape} incompatible with {x.shape}")
        kv = p.norm_kv(context)
    q, k, v = p._split(p.wq(h)), p._split(p.wk(kv)), p._split(p.wv(kv))
    d = p.dim // p.heads
    scores = T.mul(T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                   1.0 / np.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    p.last_attn = attn.data
    o = T.matmul(attn, v)                                    # [..., H, L, d]
    n = o.ndim
    o = T.transpose(o, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    o = T.reshape(o, o.shape[:-2] + (p.dim,))
    return T.add(x, p.wo(o))


class FeedForward(Module):
    """Pre-norm two-layer MLP with a residual: ``x + W2 relu(W1 norm(x))``."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim, LN_EPS)
        self.fc1 = Linear(dim, hidden, rng, gain=np.sqrt(2.0))
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.fc2(T.relu(self.fc1(self.norm(x)))))


class FusionBranch(Module):
    """``FFN(MHA_img(img) + MHA_ins(ins))`` over one token axis.

    In ``cross`` mode a single attention block takes instance tokens as
    queries and image tokens as keys/values.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 instance: bool = True, cross: bool = False):
        self.cross = cross and instance
        if self.cross:
            self.mha_cross = MultiHeadAttention(dim, heads, rng, cross=True)
        else:
            self.mha_img = MultiHeadAttention(dim, heads, rng)
            if instance:
                self.mha_ins = MultiHeadAttention(dim, heads, rng)
        self.ffn = FeedForward(dim, 2 * dim, rng)
        self.instance = instance

    def __call__(self, img: Tensor, ins: Tensor | None) -> Tensor:
        if self.cross:
            z = self.mha_cross(ins, img)
        else:
            z = self.mha_img(img)
            if self.instance and ins is not None:
                z = T.add(z, self.mha_ins(ins))
        return self.ffn(z)


def _check_pair(f_img: Tensor, f_ins: Tensor | None) -> None:
    if f_img.ndim != 5:
        raise DimensionError(f"expected [B, T, C, H, W] features, got {f_img.shape}")
    if f_ins is not None and f_ins.shape != f_img.shape:
        raise DimensionError(f"image features {f_img.shape} and instance embeddings {f_ins.shape} differ")


def unfold_spatial(x: Tensor) -> Tensor:
    B, Tn, C, H, W = x.shape
    return T.reshape(T.transpose(x, (0, 1, 3, 4, 2)), (B, Tn, H * W, C))


def unfold_temporal(x: Tensor) -> Tensor:
    B, Tn, C, H, W = x.shape
    return T.reshape(T.transpose(x, (0, 3, 4, 1, 2)), (B, H * W, Tn, C))


def spatial_attention(f_img: Tensor, f_ins: Tensor | None, branch: FusionBranch) -> Tensor:
    """Per-frame fusion over the HW tokens; returns ``f^S`` as ``[B, T, HW, C]``."""
    _check_pair(f_img, f_ins)
    img = unfold_spatial(f_img)
    ins = unfold_spatial(f_ins) if f_ins is not None else None
    return branch(img, ins)


def temporal_attention(f_img: Tensor, f_ins: Tensor | None, branch: FusionBranch) -> Tensor:
    """Per-location fusion over the T tokens; returns ``f^T`` as ``[B, HW, T, C]``."""
    _check_pair(f_img, f_ins)
    img = unfold_temporal(f_img)
    ins = unfold_temporal(f_ins) if f_ins is not None else None
    return branch(img, ins)


@dataclass
class Prototype:
    """Global token feature ``[..., C]`` plus ``T`` local features ``[..., T, C]``."""

    token: Tensor
    locals: Tensor

    @property
    def frames(self) -> int:
        return self.locals.shape[-2]

    def __getitem__(self, idx) -> "Prototype":
        return Prototype(T.getitem(self.token, idx), T.getitem(self.locals, idx))


class GlobalFusion(Module):
    def __init__(self, dim: int, heads: int, frames: int, rng: np.random.Generator):
        self.token = Tensor(rng.normal(0.0, 0.02, size=dim), requires_grad=True, name="token")
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(frames + 1, dim)), requires_grad=True, name="pos")
        self.mha = MultiHeadAttention(dim, heads, rng)

    def __call__(self, f_st: Tensor) -> Prototype:
        return fuse_tokens(f_st, self)


def pool_branches(f_s: Tensor | None, f_t: Tensor | None) -> Tensor:
    """``f^ST = mean_HW(f^S) + mean_HW(f^T)``; either branch may be absent."""
    parts = []
    if f_s is not None:
        parts.append(T.mean(f_s, axis=2))
    if f_t is not None:
        parts.append(T.mean(f_t, axis=1))
    if not parts:
        raise DimensionError("global fusion needs at least one branch")
    return parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])


def fuse_tokens(f_st: Tensor, p: GlobalFusion) -> Prototype:
    """Prepend the learnable token, add positions, attend, split token/locals."""
    if f_st.ndim != 3 or f_st.shape[-1] != p.token.shape[0]:
        raise DimensionError(f"expected f^ST as [B, T, {p.token.shape[0]}], got {f_st.shape}")
    B, Tn, C = f_st.shape
    if p.pos.shape[0] != Tn + 1:
        raise DimensionError(f"positional table has {p.pos.shape[0]} rows, need T+1 = {Tn + 1}")
    tok = T.add(T.reshape(p.token, (1, 1, C)), np.zeros((B, 1, C)))
    seq = T.add(T.concat([tok, f_st], axis=1), p.pos)
    out = p.mha(seq)
    return Prototype(out[:, 0, :], out[:, 1:, :])


def global_fusion(f_s: Tensor | None, f_t: Tensor | None, p: GlobalFusion) -> Prototype:
    return fuse_tokens(pool_branches(f_s, f_t), p)
