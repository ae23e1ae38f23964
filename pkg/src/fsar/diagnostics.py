"""Gradient checks used by ``fsar gradcheck``: single ops and whole-model parameter groups."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from fsar import tensor as T
from fsar.attention import Prototype
from fsar.config import GenerationConfig, TrainConfig
from fsar.data import Episode, VideoSample, build_classes, render_sample, sparse_sample_frames
from fsar.gradcheck import gradcheck
from fsar.matching import classify
from fsar.model import FewShotModel, build_model
from fsar.tensor import Tensor

OP_TOL = 1e-6
MODEL_TOL = 1e-4

# parameter-path prefixes owned by each group; "match" has no parameters and
# is checked with respect to the prototypes it consumes
MODULE_GROUPS: dict[str, tuple[str, ...]] = {
    "ops": (),
    "backbone": ("backbone.",),
    "ipm": ("ipe.", "ipd."),
    "sam": ("spatial.", "temporal.", "fusion."),
    "match": (),
}


@dataclass
class CheckResult:
    group: str
    name: str
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    tol: float
    max_rel_error_unfrozen: float | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _signed_away_from_zero(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.3, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(a, requires_grad=True)


# each case: rng -> (leaf inputs, function of those inputs); inputs keep clear
# of kinks so central differences are exact to O(eps^2)
OP_CASES: dict[str, Callable[[np.random.Generator], tuple[list[Tensor], Callable]]] = {
    "add": lambda r: ([_leaf(r.standard_normal((3, 4))), _leaf(r.standard_normal(4))], T.add),
    "sub": lambda r: ([_leaf(r.standard_normal((3, 1))), _leaf(r.standard_normal((3, 4)))], T.sub),
    "mul": lambda r: ([_leaf(r.standard_normal((2, 3))), _leaf(r.standard_normal((2, 3)))], T.mul),
    "div": lambda r: ([_leaf(r.standard_normal((2, 3))), _leaf(r.uniform(0.5, 2, (2, 3)))], T.div),
    "relu": lambda r: ([_leaf(_signed_away_from_zero((3, 4), r))], T.relu),
    "sigmoid": lambda r: ([_leaf(r.standard_normal((3, 4)))], T.sigmoid),
    "exp": lambda r: ([_leaf(r.standard_normal(3))], T.exp),
    "log": lambda r: ([_leaf(r.uniform(0.5, 2.0, 3))], T.log),
    "sqrt": lambda r: ([_leaf(r.uniform(0.5, 2.0, 3))], T.sqrt),
    "square": lambda r: ([_leaf(r.standard_normal(3))], T.square),
    "norm": lambda r: ([_leaf(r.standard_normal((3, 5)))], lambda a: T.norm(a, axis=-1)),
    "mean": lambda r: ([_leaf(r.standard_normal((3, 4, 2)))], lambda a: T.mean(a, axis=(0, 2))),
    "min": lambda r: ([_leaf(r.standard_normal((4, 5)))], lambda a: T.min_(a, axis=1)),
    "matmul": lambda r: ([_leaf(r.standard_normal((2, 3, 4))), _leaf(r.standard_normal((4, 2)))], T.matmul),
    "softmax": lambda r: ([_leaf(r.standard_normal((3, 4)))], lambda a: T.softmax(a, axis=0)),
    "log_softmax": lambda r: ([_leaf(r.standard_normal((3, 4)))], lambda a: T.log_softmax(a, axis=1)),
    "transpose": lambda r: ([_leaf(r.standard_normal((2, 3, 4)))], lambda a: T.transpose(a, (2, 0, 1))),
    "reshape": lambda r: ([_leaf(r.standard_normal((2, 6)))], lambda a: T.reshape(a, (3, 4))),
    "concat": lambda r: ([_leaf(r.standard_normal((2, 3))), _leaf(r.standard_normal((1, 3)))],
                         lambda a, b: T.concat([a, b], axis=0)),
    "getitem": lambda r: ([_leaf(r.standard_normal((3, 4, 2)))], lambda a: a[:, 1:3, 0]),
    "upsample": lambda r: ([_leaf(r.standard_normal((2, 3, 3)))], T.upsample_nearest2x),
    "layer_norm": lambda r: ([_leaf(r.standard_normal((3, 5))), _leaf(r.standard_normal(5)),
                              _leaf(r.standard_normal(5))], lambda x, g, b: T.layer_norm(x, g, b, 1e-5)),
    "conv2d": lambda r: ([_leaf(r.standard_normal((2, 2, 5, 5))), _leaf(r.standard_normal((3, 2, 3, 3))),
                          _leaf(r.standard_normal(3))], lambda x, w, b: T.conv2d(x, w, b, 2, 1)),
    "clamp_min": lambda r: ([_leaf(_signed_away_from_zero(4, r))], lambda a: T.clamp_min(a, 0.0)),
}


def check_op(name: str, eps: float = 1e-5) -> CheckResult:
    """Check one op through a random linear read-out ``sum(w * op(inputs))``."""
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs, fn = OP_CASES[name](rng)
    weights = rng.standard_normal(fn(*inputs).shape)
    rep = gradcheck(lambda: T.sum_(T.mul(fn(*inputs), weights)), inputs, eps=eps)
    return CheckResult("ops", name, rep.max_rel_error, rep.max_abs_error,
                       sum(p.n_coords for p in rep.params), OP_TOL)


# ----------------------------------------------------------------------------
# whole-model checks on a small configuration


def toy_config() -> TrainConfig:
    """Smallest configuration that still exercises every part of the model."""
    return TrainConfig(way=2, shot=1, query=1, frames=2, channels=8, heads=2)


def toy_episode(cfg: TrainConfig, seed: int) -> tuple[Episode, np.ndarray, np.ndarray]:
    """Render an in-memory ``N``-way episode; no dataset on disk is needed."""
    rng = np.random.default_rng([seed, 0xC4EC])
    gcfg = GenerationConfig(n_train_classes=max(cfg.way, 2), n_test_classes=2, max_way=2,
                            max_shot=1, max_query=1, samples_per_class=2)
    classes = [c for c in build_classes(gcfg, rng) if c.split == "train"][:cfg.way]
    videos = [[render_sample(c, gcfg, rng) for _ in range(cfg.shot + cfg.query)] for c in classes]
    support = [(c.class_id, i * 100 + k) for i, c in enumerate(classes) for k in range(cfg.shot)]
    queries = [(c.class_id, i * 100 + k) for i, c in enumerate(classes)
               for k in range(cfg.shot, cfg.shot + cfg.query)]
    ep = Episode(cfg.way, cfg.shot, cfg.query, [c.class_id for c in classes],
                 support, [i for i in range(cfg.way) for _ in range(cfg.shot)],
                 queries, [i for i in range(cfg.way) for _ in range(cfg.query)])
    pairs = []
    for _, sid in support + queries:
        r = videos[sid // 100][sid % 100]
        pairs.append(sparse_sample_frames(VideoSample(r.frames, r.masks, 0, sid), cfg.frames, False, None))
    return ep, np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def check_model_group(group: str, eps: float = 1e-5, seed: int = 0, max_coords: int = 6,
                      model: FewShotModel | None = None) -> list[CheckResult]:
    """Per-parameter checks of the total episode loss for one parameter group."""
    from fsar.runtime import episode_forward

    cfg = model.cfg if model is not None else toy_config()
    model = model or build_model(cfg, seed)
    ep, frames, masks = toy_episode(cfg, seed)
    prefixes = MODULE_GROUPS[group]
    named = [(n, p) for n, p in model.named_parameters() if n.startswith(prefixes)]
    rep = gradcheck(lambda: episode_forward(ep, model, frames, masks).total,
                    [p for _, p in named], eps=eps, names=[n for n, _ in named],
                    max_coords=max_coords, rng=np.random.default_rng(seed), frozen=True)
    return [CheckResult(group, p.name, p.max_rel_error, p.max_abs_error, p.n_coords, MODEL_TOL,
                        p.max_rel_error_unfrozen) for p in rep.params]


def check_matching(eps: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    """Score + cross-entropy gradients with respect to the prototypes themselves."""
    from fsar.runtime import cross_entropy

    rng = np.random.default_rng([seed, 0x3A7C])
    n, t, c = 3, 4, 8
    s_tok, s_loc = _leaf(rng.standard_normal((n, c))), _leaf(rng.standard_normal((n, t, c)))
    q_tok, q_loc = _leaf(rng.standard_normal((2, c))), _leaf(rng.standard_normal((2, t, c)))
    leaves = [s_tok, s_loc, q_tok, q_loc]

    def loss():
        scores = classify(Prototype(q_tok, q_loc), Prototype(s_tok, s_loc))
        return cross_entropy(scores, [0, 2])

    rep = gradcheck(loss, leaves, eps=eps, names=["support.token", "support.locals",
                                                   "query.token", "query.locals"])
    return [CheckResult("match", p.name, p.max_rel_error, p.max_abs_error, p.n_coords, MODEL_TOL)
            for p in rep.params]


def run_gradcheck(groups, eps: float = 1e-5, seed: int = 0) -> Iterator[CheckResult]:
    for group in groups:
        if group == "ops":
            for name in sorted(OP_CASES):
                yield check_op(name, eps)
        elif group == "match":
            yield from check_matching(eps, seed)
        else:
            yield from check_model_group(group, eps, seed)


def mask_batch(videos: int = 8, frames: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """A fixed in-memory batch ``[V, T, 3, 32, 32]`` with teacher masks ``[V, T, 1, 32, 32]``."""
    rng = np.random.default_rng([seed, 0x3A5C])
    gcfg = GenerationConfig()
    classes = build_classes(gcfg, rng)
    pairs = []
    for v in range(videos):
        r = render_sample(classes[v % len(classes)], gcfg, rng)
        pairs.append(sparse_sample_frames(VideoSample(r.frames, r.masks, 0, v), frames, False, None))
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]).astype(np.float64)


def fit_masks(model: FewShotModel, frames: np.ndarray, masks: np.ndarray, steps: int = 200,
              lr: float = 1e-3) -> list[float]:
    """Adam on the instance encoder/decoder alone; returns the loss before each step and after the last."""
    from fsar.instance import mask_loss
    from fsar.nn import Adam

    with T.no_grad():
        f_img = model.backbone(frames)          # backbone stays frozen
    params = model.ipe.parameters() + model.ipd.parameters()
    opt = Adam(params, lr=lr)
    history = []
    for _ in range(steps):
        opt.zero_grad()
        loss = mask_loss(masks, model.ipd(model.ipe(f_img)))
        T.backward(loss)
        opt.step()
        history.append(loss.item())
    with T.no_grad():
        history.append(mask_loss(masks, model.ipd(model.ipe(f_img))).item())
    return history
