"""Central finite-difference gradient checking against the reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from fsar.errors import ContractError
from fsar.tensor import Tensor, backward, frozen_branches, replay

# relative errors use max(|analytic|, |numeric|, floor); central differences
# carry roundoff of about ulp(loss) / eps (~1e-11 at eps=1e-5), so gradients
# below the floor are judged on absolute error instead
REL_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    max_abs_error: float
    max_rel_error: float
    n_coords: int
    # plain central differences, without frozen branches; differs from the
    # frozen figure only at coordinates whose +-eps step crosses a kink
    max_rel_error_unfrozen: float | None = None


@dataclass
class GradCheckReport:
    eps: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def max_abs_error(self) -> float:
        return max((p.max_abs_error for p in self.params), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _numeric(forward: Callable[[], Tensor], flat: np.ndarray, coords: np.ndarray, eps: float,
             before: Callable[[], None]) -> np.ndarray:
    out = np.empty(coords.size)
    for k, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        before()
        fp = forward().item()
        flat[c] = orig - eps
        before()
        fm = forward().item()
        flat[c] = orig
        out[k] = (fp - fm) / (2.0 * eps)
    return out


def gradcheck(forward: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
              names: Sequence[str] | None = None, max_coords: int | None = None,
              rng: np.random.Generator | None = None, frozen: bool = False) -> GradCheckReport:
    """Compare reverse-pass gradients of ``forward()`` with central differences.

    ``forward`` closes over ``params`` and is re-run with each coordinate
    nudged by ``+-eps`` in place.  ``max_coords`` caps the coordinates checked
    per parameter (sampled with ``rng``); ``None`` checks all of them.

    With ``frozen`` the piecewise choices (relu masks, arg-mins, ...) of the
    unperturbed pass are replayed during the perturbed passes, so the
    differences measure the derivative of the active piece: exactly what the
    reverse pass computes.  Plain differences are reported alongside.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.zero_grad()
    loss = forward()
    again = forward()
    if loss.data.tobytes() != again.data.tobytes():
        raise ContractError("forward is not deterministic: two evaluations at the same point differ")
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    report = GradCheckReport(eps=eps)
    pick = rng if rng is not None else np.random.default_rng(0)
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, size=max_coords, replace=False))
        gan = ga.reshape(-1)[coords]
        plain = _numeric(forward, flat, coords, eps, lambda: None)
        plain_rel = relative_error(gan, plain)
        if frozen:
            with frozen_branches() as tape:
                forward()
                gnum = _numeric(forward, flat, coords, eps, lambda: replay(tape))
        else:
            gnum = plain
        err = np.abs(gan - gnum)
        rel = relative_error(gan, gnum)
        report.params.append(ParamCheck(name, float(err.max(initial=0.0)), float(rel.max(initial=0.0)),
                                        int(coords.size),
                                        float(plain_rel.max(initial=0.0)) if frozen else None))
    return report
