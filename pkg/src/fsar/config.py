"""Plain-text ``key = value`` configuration files and the typed configs they fill.

One pair per line, ``#`` starts a comment, unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, TypeVar

from fsar.errors import ConfigError

C = TypeVar("C")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, typ: Any, key: str) -> Any:
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool,
                                             "str": str}.get(str(typ), str)
    try:
        if typ is bool:
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if typ is int:
            return int(value, 0)
        if typ is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
    return value


def from_kv(cls: type[C], pairs: dict[str, str]) -> C:
    known = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, known[k], k) for k, v in pairs.items()}
    obj = cls(**kwargs)
    validate = getattr(obj, "validate", None)
    if validate:
        validate()
    return obj


def load_config(cls: type[C], path: str | Path) -> C:
    return from_kv(cls, parse_kv(Path(path).read_text(encoding="utf-8")))


def dump_kv(obj) -> str:
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


@dataclass
class GenerationConfig:
    """Synthetic dataset recipe."""

    n_train_classes: int = 12
    n_test_classes: int = 6
    samples_per_class: int = 40
    t_raw: int = 16
    size: int = 32
    render_size: int = 40
    distractors: int = 1
    # pool of per-class distractor policies; a small pool forces classes to share one
    distractor_policies: int = 3
    distractor_value: float = 0.55
    color_jitter: float = 0.15
    mask_flip_noise: float = 0.0
    # episode shapes the dataset must host
    max_way: int = 5
    max_shot: int = 5
    max_query: int = 5

    def validate(self) -> None:
        if self.n_train_classes < 2 or self.n_test_classes < 2:
            raise ConfigError("each split needs at least 2 classes")
        if self.n_train_classes + self.n_test_classes > 32:
            raise ConfigError("at most 32 (shape, trajectory) classes exist")
        if min(self.n_train_classes, self.n_test_classes) < self.max_way:
            raise ConfigError(f"splits of {self.n_train_classes}/{self.n_test_classes} classes "
                              f"cannot host {self.max_way}-way episodes")
        if self.samples_per_class < self.max_shot + self.max_query:
            raise ConfigError(f"{self.samples_per_class} samples per class cannot host "
                              f"K+Q = {self.max_shot + self.max_query}")
        if self.render_size < self.size:
            raise ConfigError("render_size must be >= size")
        if self.t_raw < 1 or self.distractors < 0 or self.distractor_policies < 1:
            raise ConfigError("t_raw >= 1, distractors >= 0, distractor_policies >= 1 required")
        if not 0.0 <= self.mask_flip_noise < 0.5:
            raise ConfigError("mask_flip_noise must lie in [0, 0.5)")


@dataclass
class TrainConfig:
    """Everything a training run needs; snapshotted into checkpoints."""

    dataset: str = ""
    way: int = 3
    shot: int = 1
    query: int = 2
    frames: int = 4
    channels: int = 16
    heads: int = 4
    mask_weight: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_episodes: int = 2000
    episodes_per_step: int = 1
    eval_episodes: int = 300
    train_seed: int = 0
    eval_seed: int = 1
    instance: bool = True
    spatial: bool = True
    temporal: bool = True
    fusion: str = "self"
    local_weight: float = 1.0
    global_weight: float = 1.0
    # multiplies scores before the cross-entropy only; 1.0 uses raw scores as logits
    logit_scale: float = 5.0
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.way < 2:
            raise ConfigError("way must be >= 2")
        if self.shot < 1 or self.query < 1 or self.frames < 1:
            raise ConfigError("shot, query and frames must be >= 1")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be positive")
        if self.mask_weight < 0:
            raise ConfigError("mask_weight (lambda) must be >= 0")
        if self.local_weight < 0 or self.global_weight < 0 or \
                (self.local_weight == 0 and self.global_weight == 0):
            raise ConfigError("match weights must be >= 0 with at least one positive")
        if not (self.instance or self.spatial or self.temporal):
            raise ConfigError("instance stream, spatial and temporal branches cannot all be disabled")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.fusion not in ("self", "cross"):
            raise ConfigError(f"fusion must be 'self' or 'cross', got {self.fusion!r}")
        if self.episodes_per_step < 1 or self.checkpoint_every < 0 or self.train_episodes < 0:
            raise ConfigError("episodes_per_step >= 1, checkpoint_every >= 0, train_episodes >= 0")

    def replace(self, **changes) -> "TrainConfig":
        new = dataclasses.replace(self, **changes)
        new.validate()
        return new
