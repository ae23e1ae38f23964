"""Global-local prototype matching.

The local term is the bidirectional mean Hausdorff metric (Bi-MHM) over
frame features with cosine distance ``1 - cos``; the global term is the
cosine similarity of the token features.  A class score is
``w_local * bi_mhm + w_global * cos``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from fsar import tensor as T
from fsar.attention import Prototype
from fsar.errors import ConfigError, ContractError, DimensionError
from fsar.tensor import Tensor

NORM_FLOOR = 1e-12
LOCAL_METRICS = ("bi_mhm", "otam", "none")


@dataclass
class MatchConfig:
    local_metric: str = "bi_mhm"
    w_local: float = 1.0
    w_global: float = 1.0

    def validate(self) -> None:
        if self.local_metric not in LOCAL_METRICS:
            raise ConfigError(f"local metric must be one of {LOCAL_METRICS}")
        if self.local_metric == "otam":
            raise ConfigError("the 'otam' local metric name is reserved and not implemented")
        if self.w_local < 0 or self.w_global < 0:
            raise ConfigError("match weights must be non-negative")
        w_l = self.w_local if self.local_metric != "none" else 0.0
        if w_l <= 0 and self.w_global <= 0:
            raise ConfigError("at least one of the local and global terms must be active")


def unit(x: Tensor) -> Tensor:
    return T.div(x, T.norm(x, axis=-1, floor=NORM_FLOOR, keepdims=True))


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity over the last axis (broadcasting), norms floored at 1e-12."""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_sim feature sizes differ: {u.shape} vs {v.shape}")
    return T.sum_(T.mul(unit(u), unit(v)), axis=-1)


def frame_distances(a: Tensor, b: Tensor) -> Tensor:
    """``D[..., i, j] = 1 - cos(a_i, b_j)`` for ``a [..., T, C]`` and ``b [..., T', C]``."""
    ua, ub = unit(a), unit(b)
    n = ub.ndim
    return T.sub(1.0, T.matmul(ua, T.transpose(ub, tuple(range(n - 2)) + (n - 1, n - 2))))


def bi_mhm(a: Tensor, b: Tensor) -> Tensor:
    """Negated bidirectional mean Hausdorff distance; 0 is a perfect match."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"bi_mhm needs equal [T, C], got {a.shape} and {b.shape}")
    D = frame_distances(a, b)
    a_to_b = T.mean(T.min_(D, axis=-1), axis=-1)
    b_to_a = T.mean(T.min_(D, axis=-2), axis=-1)
    return T.mul(T.add(a_to_b, b_to_a), -0.5)


def global_local_score(support: Prototype, query: Prototype, cfg: MatchConfig | None = None) -> Tensor:
    cfg = cfg or MatchConfig()
    if support.frames != query.frames:
        raise DimensionError(f"prototype lengths differ: {support.frames} vs {query.frames}")
    terms = []
    if cfg.local_metric == "bi_mhm" and cfg.w_local > 0:
        terms.append(T.mul(bi_mhm(support.locals, query.locals), cfg.w_local))
    if cfg.w_global > 0:
        terms.append(T.mul(cosine_sim(support.token, query.token), cfg.w_global))
    if not terms:
        raise ConfigError("match config disables both terms")
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


def class_prototype_average(protos: Sequence[Prototype] | Prototype, axis: int | None = None) -> Prototype:
    """Elementwise mean of K prototypes.

    Accepts a list of prototypes, or one batched prototype averaged over ``axis``.
    """
    if isinstance(protos, Prototype):
        if axis is None:
            raise ContractError("batched prototype averaging needs an axis")
        return Prototype(T.mean(protos.token, axis=axis), T.mean(protos.locals, axis=axis))
    protos = list(protos)
    if not protos:
        raise ContractError("cannot average an empty list of prototypes")
    if len({p.frames for p in protos}) != 1:
        raise DimensionError("prototypes have different frame counts")
    if len(protos) == 1:
        return protos[0]
    return Prototype(T.mean(T.stack([p.token for p in protos]), axis=0),
                     T.mean(T.stack([p.locals for p in protos]), axis=0))


def classify(query: Prototype, class_protos: Prototype, cfg: MatchConfig | None = None) -> Tensor:
    """Score queries ``[Qn, ...]`` against class prototypes ``[N, ...]`` -> ``[Qn, N]``.

    A single unbatched query (token ``[C]``) yields scores of shape ``[N]``.
    """
    if class_protos.token.ndim != 2 or class_protos.token.shape[0] < 2:
        raise ContractError(f"classify needs N >= 2 batched class prototypes, got {class_protos.token.shape}")
    single = query.token.ndim == 1
    if single:
        query = Prototype(T.reshape(query.token, (1,) + query.token.shape),
                          T.reshape(query.locals, (1,) + query.locals.shape))
    qn, c = query.token.shape
    n, tn, _ = class_protos.locals.shape
    sup = Prototype(T.reshape(class_protos.token, (1, n, c)),
                    T.reshape(class_protos.locals, (1, n, tn, c)))
    q = Prototype(T.reshape(query.token, (qn, 1, c)),
                  T.reshape(query.locals, (qn, 1, query.frames, c)))
    scores = global_local_score(sup, q, cfg)
    return T.reshape(scores, (n,)) if single else scores
