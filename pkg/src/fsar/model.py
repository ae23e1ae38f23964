"""The full few-shot model: backbone, instance perception, attention fusion, matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar import tensor as T
from fsar.attention import (FusionBranch, GlobalFusion, Prototype, global_fusion,
                            pool_branches, spatial_attention, temporal_attention, unfold_spatial)
from fsar.backbone import Backbone
from fsar.config import TrainConfig
from fsar.instance import InstanceDecoder, InstanceEncoder
from fsar.matching import MatchConfig
from fsar.nn import Module
from fsar.tensor import Tensor


@dataclass
class Encoded:
    protos: Prototype               # token [V, C], locals [V, T, C]
    masks: Tensor | None            # [V, T, 1, 32, 32] when decoded
    f_img: Tensor
    f_ins: Tensor | None


class FewShotModel(Module):
    """Structure follows the toggles in ``cfg``; disabled parts own no parameters."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        C, H = cfg.channels, cfg.heads
        cross = cfg.fusion == "cross"
        self.backbone = Backbone(C, rng)
        if cfg.instance:
            self.ipe = InstanceEncoder(C, rng)
            self.ipd = InstanceDecoder(C, rng)
        if cfg.spatial:
            self.spatial = FusionBranch(C, H, rng, instance=cfg.instance, cross=cross)
        if cfg.temporal:
            self.temporal = FusionBranch(C, H, rng, instance=cfg.instance, cross=cross)
        self.fusion = GlobalFusion(C, H, cfg.frames, rng)
        self.cfg = cfg

    @property
    def match_config(self) -> MatchConfig:
        return MatchConfig("bi_mhm", self.cfg.local_weight, self.cfg.global_weight)

    def encode(self, frames, decode_masks: bool = False) -> Encoded:
        """``frames [V, T, 3, 32, 32]`` -> per-video prototypes (and mask predictions)."""
        frames = T.as_tensor(frames)
        V, Tn = frames.shape[:2]
        f_img = self.backbone(frames)                         # [V, T, C, 8, 8]
        f_ins = self.ipe(f_img) if self.cfg.instance else None
        masks = self.ipd(f_ins) if decode_masks and f_ins is not None else None
        f_s = spatial_attention(f_img, f_ins, self.spatial) if self.cfg.spatial else None
        f_t = temporal_attention(f_img, f_ins, self.temporal) if self.cfg.temporal else None
        if f_s is None and f_t is None:
            # no fusion branch: pool the raw streams per frame
            f_s = unfold_spatial(f_img)
            f_s = T.add(f_s, unfold_spatial(f_ins)) if f_ins is not None else f_s
            f_st = pool_branches(f_s, None)
            protos = self.fusion(f_st)
        else:
            protos = global_fusion(f_s, f_t, self.fusion)
        return Encoded(protos, masks, f_img, f_ins)


def build_model(cfg: TrainConfig, seed: int | None = None) -> FewShotModel:
    seed = cfg.train_seed if seed is None else seed
    return FewShotModel(cfg, np.random.default_rng([seed, 0x5EED]))


def resize_positions(pos: np.ndarray, frames: int) -> np.ndarray:
    """Linearly resample the timestamp rows of a ``[(T+1), C]`` table to ``frames`` rows."""
    if pos.shape[0] == frames + 1:
        return pos.copy()
    old = pos[1:]
    src = np.linspace(0.0, 1.0, old.shape[0]) if old.shape[0] > 1 else np.zeros(1)
    dst = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    rows = np.stack([np.interp(dst, src, old[:, c]) for c in range(old.shape[1])], axis=1)
    return np.concatenate([pos[:1], rows], axis=0)
