"""Episodic training and many-episode evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from fsar import tensor as T
from fsar.checkpoint import restore, save_checkpoint, decode
from fsar.config import TrainConfig
from fsar.data import Dataset, Episode, sample_episode, sparse_sample_frames
from fsar.errors import ConfigError, ContractError, NonFiniteLossError
from fsar.instance import mask_loss
from fsar.matching import MatchConfig, class_prototype_average, classify
from fsar.model import FewShotModel, build_model, resize_positions
from fsar.nn import Adam
from fsar.tensor import Tensor

log = logging.getLogger(__name__)


def episode_seed(base: int, index: int) -> int:
    """Seed of episode ``index`` in a run seeded with ``base``; replays one episode in isolation."""
    return int(np.random.SeedSequence([base, index]).generate_state(1, dtype=np.uint64)[0])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows; ``logits`` is ``[N]`` or ``[Q, N]``."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = logits.shape[1]
    if labels.shape[0] != logits.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if labels.min() < 0 or labels.max() >= n:
        raise ContractError(f"label out of range [0, {n}): {labels.tolist()}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    nll = T.mul(T.sum_(T.mul(T.log_softmax(logits, axis=1), onehot), axis=1), -1.0)
    return T.mean(nll)


@dataclass
class EpisodeOutput:
    scores: Tensor          # [N*Q, N]
    labels: np.ndarray
    ce: Tensor
    mask: Tensor | None
    total: Tensor

    @property
    def accuracy(self) -> float:
        return float(np.mean(np.argmax(self.scores.data, axis=1) == self.labels))


def load_episode_frames(ds: Dataset, ep: Episode, frames: int, train: bool,
                        rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    vids = [ds.load(sid) for _, sid in ep.support + ep.queries]
    pairs = [sparse_sample_frames(v, frames, train, rng) for v in vids]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def auxiliary_loss(enc, ep: Episode) -> Tensor | None:
    """Attachment point for an extra episode-level loss term; contributes nothing."""
    return None


def episode_forward(ep: Episode, model: FewShotModel, frames: np.ndarray, masks: np.ndarray | None,
                    mask_weight: float | None = None, match: MatchConfig | None = None) -> EpisodeOutput:
    """Score every query of one episode and assemble ``CE + lambda * mask``.

    ``frames`` stacks support videos (class-major) then query videos.  The mask
    term is only formed when ``masks`` is given and the model has an instance stream.
    """
    lam = model.cfg.mask_weight if mask_weight is None else mask_weight
    decode = masks is not None and model.cfg.instance
    enc = model.encode(frames, decode_masks=decode)
    n, k = ep.way, ep.shot
    ns = n * k
    protos = enc.protos
    sup = protos[:ns]
    C = sup.token.shape[-1]
    sup = sup.__class__(T.reshape(sup.token, (n, k, C)),
                        T.reshape(sup.locals, (n, k, sup.frames, C)))
    class_protos = class_prototype_average(sup, axis=1)
    queries = protos[ns:]
    scores = classify(queries, class_protos, match or model.match_config)
    labels = np.asarray(ep.query_labels)
    logits = scores if model.cfg.logit_scale == 1.0 else T.mul(scores, model.cfg.logit_scale)
    ce = cross_entropy(logits, labels)
    mloss = mask_loss(masks, enc.masks) if decode else None
    total = T.add(ce, T.mul(mloss, lam)) if mloss is not None else ce
    aux = auxiliary_loss(enc, ep)
    if aux is not None:
        total = T.add(total, aux)
    return EpisodeOutput(scores, labels, ce, mloss, total)


@dataclass
class Metrics:
    split: str
    accs: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)
    mask: list[float] = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.accs)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accs)) if self.accs else float("nan")

    @property
    def ci95(self) -> float:
        if len(self.accs) < 2:
            return float("nan")
        return float(1.96 * np.std(self.accs, ddof=1) / math.sqrt(len(self.accs)))

    def summary(self) -> dict:
        return {"split": self.split, "episodes": self.episodes,
                "mean_acc": self.mean_acc, "ci95": self.ci95}


def record(episode: int, split: str, out: EpisodeOutput) -> dict:
    return {"episode": episode, "split": split, "acc": out.accuracy,
            "ce": float(out.ce.data), "mask_loss": None if out.mask is None else float(out.mask.data),
            "total_loss": float(out.total.data)}


def dump_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: FewShotModel
    optimizer: Adam
    records: list[dict]
    episode: int


def train_iter(cfg: TrainConfig, ds: Dataset | None = None, model: FewShotModel | None = None,
               optimizer: Adam | None = None, start: int = 0) -> Iterator[tuple[dict, FewShotModel, Adam]]:
    """Yield one metrics record per training episode (after the step it contributes to)."""
    cfg.validate()
    ds = ds or Dataset(cfg.dataset)
    ds.check_feasible("train", cfg.way, cfg.shot, cfg.query)
    model = model or build_model(cfg)
    params = model.parameters()
    opt = optimizer or Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    opt.zero_grad()
    inv = 1.0 / cfg.episodes_per_step
    for i in range(start, cfg.train_episodes):
        seed = episode_seed(cfg.train_seed, i)
        rng = np.random.default_rng(seed)
        ep = sample_episode(ds, "train", cfg.way, cfg.shot, cfg.query, rng)
        frames, masks = load_episode_frames(ds, ep, cfg.frames, True, rng)
        out = episode_forward(ep, model, frames, masks)
        if not np.isfinite(out.total.data):
            raise NonFiniteLossError(f"non-finite loss at training episode {i} (episode seed {seed})", i, seed)
        T.backward(T.mul(out.total, inv) if cfg.episodes_per_step > 1 else out.total)
        if (i + 1 - start) % cfg.episodes_per_step == 0 or i + 1 == cfg.train_episodes:
            opt.step()
            opt.zero_grad()
        yield record(i, "train", out), model, opt


def train(cfg: TrainConfig, out_dir: str | Path | None = None, ds: Dataset | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the full episodic training loop.

    With ``out_dir`` set, writes ``metrics.jsonl``, periodic ``ckpt_<episode>.i2st``
    and a final ``model.i2st``.
    """
    out = Path(out_dir) if out_dir is not None else None
    sink = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        sink = open(out / "metrics.jsonl", "w", encoding="utf-8")
    records = []
    model = opt = None
    try:
        for rec, model, opt in train_iter(cfg, ds):
            records.append(rec)
            if sink:
                sink.write(dump_record(rec) + "\n")
            if progress:
                progress(rec)
            n = rec["episode"] + 1
            if out is not None and cfg.checkpoint_every and n % cfg.checkpoint_every == 0 and n < cfg.train_episodes:
                save_checkpoint(model, out / f"ckpt_{n:06d}.i2st", opt, n)
    finally:
        if sink:
            sink.close()
    if model is None:
        model = build_model(cfg)
        opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    if out is not None:
        save_checkpoint(model, out / "model.i2st", opt, cfg.train_episodes)
    return TrainResult(model, opt, records, cfg.train_episodes)


def resume(path: str | Path, ds: Dataset | None = None) -> Iterator[tuple[dict, FewShotModel, Adam]]:
    ckpt = decode(Path(path).read_bytes())
    model, opt = restore(ckpt)
    return train_iter(ckpt.config, ds, model, opt, start=ckpt.episode)


# ----------------------------------------------------------------------------
# evaluation


def eval_view(model: FewShotModel, frames: int | None = None, instance: bool | None = None,
              spatial: bool | None = None, temporal: bool | None = None,
              local_only: bool = False) -> FewShotModel:
    """Shallow copy sharing parameters, with inference-time toggles applied.

    Toggles can only switch parts off.  A different frame count resamples the
    positional table (a copy; the original stays untouched).
    """
    cfg = model.cfg
    changes = {}
    for key, val in (("instance", instance), ("spatial", spatial), ("temporal", temporal)):
        if val is not None and val != getattr(cfg, key):
            if val:
                raise ConfigError(f"cannot enable {key!r}: the checkpoint was trained without it")
            changes[key] = False
    if local_only:
        changes["global_weight"] = 0.0
        changes["local_weight"] = cfg.local_weight or 1.0
    if frames is not None and frames != cfg.frames:
        changes["frames"] = frames
    if not changes:
        return model
    view = copy.copy(model)
    view.cfg = cfg.replace(**changes)
    if "frames" in changes:
        view.fusion = copy.copy(model.fusion)
        view.fusion.pos = Tensor(resize_positions(model.fusion.pos.data, frames))
    return view


def evaluate(model: FewShotModel, ds: Dataset, split: str = "test", way: int = 3, shot: int = 1,
             query: int = 2, episodes: int = 300, seed: int = 1,
             sink: Callable[[dict], None] | None = None, with_masks: bool = True) -> Metrics:
    """Mean accuracy over ``episodes`` deterministic episodes; parameters are never touched."""
    if way < 2:
        raise ConfigError(f"evaluation needs N >= 2, got {way}")
    ds.check_feasible(split, way, shot, query)
    if model.cfg.frames > ds.t_raw:
        raise ConfigError(f"T={model.cfg.frames} exceeds T_raw={ds.t_raw}")
    metrics = Metrics(split)
    with T.no_grad():
        for i in range(episodes):
            rng = np.random.default_rng(episode_seed(seed, i))
            ep = sample_episode(ds, split, way, shot, query, rng)
            frames, masks = load_episode_frames(ds, ep, model.cfg.frames, False, None)
            out = episode_forward(ep, model, frames, masks if with_masks else None)
            metrics.accs.append(out.accuracy)
            metrics.ce.append(float(out.ce.data))
            if out.mask is not None:
                metrics.mask.append(float(out.mask.data))
            if sink:
                sink(record(i, split, out))
    return metrics
