"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"I2ST" | version | json_len | json bytes | n_tensors |
    n_tensors x ( name_len | name bytes | rank | extents... | float64 LE data )

The JSON blob holds the training config snapshot, the episode counter and
the optimizer step count.  Tensor names are parameter paths; optimizer
moments are stored under ``adam.m/<path>`` and ``adam.v/<path>``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fsar.config import TrainConfig
from fsar.errors import CheckpointVersionError, ConfigError, DimensionError
from fsar.model import FewShotModel, build_model
from fsar.nn import Adam

MAGIC = b"I2ST"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    episode: int = 0
    adam_step: int = 0
    extra: dict = field(default_factory=dict)


def _write_u32(fh, v: int) -> None:
    fh.write(_U32.pack(v))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IOError(f"checkpoint truncated while reading {what}")
    return buf


def _read_u32(fh, what: str) -> int:
    return _U32.unpack(_read_exact(fh, 4, what))[0]


def encode(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    _write_u32(fh, VERSION)
    meta = {"config": dataclasses.asdict(ckpt.config), "episode": ckpt.episode,
            "adam_step": ckpt.adam_step, "extra": ckpt.extra}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    _write_u32(fh, len(blob))
    fh.write(blob)
    _write_u32(fh, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        _write_u32(fh, len(raw))
        fh.write(raw)
        _write_u32(fh, arr.ndim)
        for n in arr.shape:
            _write_u32(fh, n)
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return fh.getvalue()


def decode(buf: bytes) -> Checkpoint:
    fh = io.BytesIO(buf)
    magic = fh.read(4)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad checkpoint magic {magic!r}")
    version = _read_u32(fh, "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    meta = json.loads(_read_exact(fh, _read_u32(fh, "config length"), "config").decode("utf-8"))
    try:
        cfg = TrainConfig(**meta["config"])
        cfg.validate()
    except (TypeError, ConfigError) as exc:
        raise CheckpointVersionError(f"checkpoint config incompatible: {exc}") from None
    tensors = {}
    for _ in range(_read_u32(fh, "tensor count")):
        name = _read_exact(fh, _read_u32(fh, "name length"), "name").decode("utf-8")
        rank = _read_u32(fh, f"{name} rank")
        shape = tuple(_read_u32(fh, f"{name} extents") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(fh, 8 * count, f"{name} data"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(shape)
    if fh.read(1):
        raise IOError("trailing bytes after last tensor section")
    return Checkpoint(cfg, tensors, meta.get("episode", 0), meta.get("adam_step", 0), meta.get("extra", {}))


def snapshot(model: FewShotModel, optimizer: Adam | None = None, episode: int = 0) -> Checkpoint:
    tensors = dict(model.state_dict())
    step = 0
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        for n, m, v in zip(names, optimizer.m, optimizer.v):
            tensors[f"adam.m/{n}"] = m.copy()
            tensors[f"adam.v/{n}"] = v.copy()
        step = optimizer.t
    return Checkpoint(model.cfg, tensors, episode, step)


def save_checkpoint(model: FewShotModel, path: str | Path, optimizer: Adam | None = None,
                    episode: int = 0) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(snapshot(model, optimizer, episode)))
    tmp.replace(path)
    return path


def restore(ckpt: Checkpoint) -> tuple[FewShotModel, Adam]:
    """Build a fresh model from the snapshot config and fill every parameter.

    Raises before returning anything if a tensor is missing or mis-shaped.
    """
    model = build_model(ckpt.config)
    named = list(model.named_parameters())
    for name, p in named:
        if name not in ckpt.tensors:
            raise DimensionError(f"checkpoint lacks parameter {name!r}")
        if ckpt.tensors[name].shape != p.shape:
            raise DimensionError(f"checkpoint {name!r} has shape {ckpt.tensors[name].shape}, "
                                 f"config implies {p.shape}")
    extra = set(ckpt.tensors) - {n for n, _ in named} \
        - {f"adam.{k}/{n}" for n, _ in named for k in "mv"}
    if extra:
        raise DimensionError(f"checkpoint has tensors the config does not define: {sorted(extra)[:5]}")
    for name, p in named:
        p.data[...] = ckpt.tensors[name]
    c = ckpt.config
    opt = Adam([p for _, p in named], lr=c.lr, betas=(c.beta1, c.beta2), eps=c.adam_eps)
    if f"adam.m/{named[0][0]}" in ckpt.tensors:
        for i, (name, _) in enumerate(named):
            opt.m[i][...] = ckpt.tensors[f"adam.m/{name}"]
            opt.v[i][...] = ckpt.tensors[f"adam.v/{name}"]
        opt.t = ckpt.adam_step
    return model, opt


def load_checkpoint(path: str | Path) -> tuple[FewShotModel, Checkpoint]:
    ckpt = decode(Path(path).read_bytes())
    model, _ = restore(ckpt)
    return model, ckpt
