"""Procedural moving-shape videos with exact foreground masks, and episode sampling.

Each class is a (shape, trajectory) pair.  A sample renders the class's
foreground object moving over a smooth random background, plus distractor
objects that follow a per-class distractor policy.  The foreground is painted
last, so its mask is exactly its rasterised footprint.

On disk a dataset is ``manifest.json`` plus one ``<class_id>_<sample_id>.bin``
per sample: four little-endian u32 ``(T_raw, 3, H, W)``, then the frames as
little-endian float32, then the masks as one byte per pixel.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fsar.config import GenerationConfig
from fsar.errors import ConfigError

MANIFEST_VERSION = 1
SHAPES = ("disc", "square", "triangle", "bar")
TRAJECTORIES = ("left_right", "up_down", "diagonal", "circular",
                "zigzag", "shrink_grow", "bounce", "spiral")
BASE_RADIUS = 5.5
_HEADER = struct.Struct("<4I")


@dataclass(frozen=True)
class DistractorPolicy:
    count: int
    share_shape: bool
    share_trajectory: bool


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    trajectory: str
    split: str
    distractors: DistractorPolicy


@dataclass
class VideoSample:
    frames: np.ndarray   # [T_raw, 3, H, W] in [0, 1]
    masks: np.ndarray    # [T_raw, 1, H, W] in {0, 1}
    class_id: int
    sample_id: int


@dataclass
class Episode:
    way: int
    shot: int
    query: int
    classes: list[int]                   # global class ids in draw order
    support: list[tuple[int, int]]       # (class_id, sample_id), class-major
    support_labels: list[int]
    queries: list[tuple[int, int]]
    query_labels: list[int]


# ----------------------------------------------------------------------------
# rendering


def coverage(shape: str, cx: float, cy: float, scale: float, size: int) -> np.ndarray:
    """Boolean footprint: pixel (y, x) is covered iff its centre lies inside the shape."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    r = BASE_RADIUS * scale
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        h = 0.9 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "bar":
        return (np.abs(dx) <= 1.6 * r) & (np.abs(dy) <= 0.5 * r)
    if shape == "triangle":
        # apex up at (0, -r), base corners at (+-r, r)
        return (dy <= r) & (2.0 * dx - dy <= r) & (-2.0 * dx - dy <= r)
    raise ValueError(f"unknown shape {shape!r}")


def trajectory_points(kind: str, t_raw: int, params: dict, center: float) -> list[tuple[float, float, float]]:
    """Per-frame ``(x, y, scale)`` for one object."""
    phase, sign = params["phase"], params["sign"]
    ox, oy = params["offset"]
    out = []
    for f in range(t_raw):
        s = f / max(t_raw - 1, 1)
        th = 2.0 * math.pi * s * sign + phase
        x, y, sc = center + ox, center + oy, 1.0
        if kind == "left_right":
            x += 11.0 * math.sin(th)
        elif kind == "up_down":
            y += 11.0 * math.sin(th)
        elif kind == "diagonal":
            x += 8.0 * math.sin(th)
            y += 8.0 * math.sin(th)
        elif kind == "circular":
            x += 9.0 * math.cos(th)
            y += 9.0 * math.sin(th)
        elif kind == "zigzag":
            x += sign * (22.0 * s - 11.0)
            u = (2.0 * s + phase / (2.0 * math.pi)) % 1.0
            y += 5.0 * (4.0 * abs(u - 0.5) - 1.0)
        elif kind == "shrink_grow":
            sc = 1.0 + 0.6 * math.sin(th)
        elif kind == "bounce":
            y += 8.0 - 16.0 * abs(math.sin(0.5 * th + phase))
        elif kind == "spiral":
            rad = 2.0 + 10.0 * s
            ang = 4.0 * math.pi * s * sign + phase
            x += rad * math.cos(ang)
            y += rad * math.sin(ang)
        else:
            raise ValueError(f"unknown trajectory {kind!r}")
        out.append((x, y, sc))
    return out


def background_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth static ``[3, size, size]`` texture in roughly [0.1, 0.4]."""
    ys, xs = np.mgrid[0:size, 0:size] / size
    tex = np.empty((3, size, size))
    base = rng.uniform(0.15, 0.3, size=3)
    for c in range(3):
        acc = np.full((size, size), base[c])
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 2.5, size=2)
            ph = rng.uniform(0, 2 * math.pi)
            acc += 0.03 * np.sin(2 * math.pi * (fx * xs + fy * ys) + ph)
        tex[c] = acc
    return tex


def _object_params(rng: np.random.Generator) -> dict:
    return {
        "phase": float(rng.uniform(0.0, 2.0 * math.pi)),
        "sign": 1 if rng.random() < 0.5 else -1,
        "offset": (float(rng.uniform(-2.0, 2.0)), float(rng.uniform(-2.0, 2.0))),
    }


# foreground colour: one warm hue for every class, jittered per sample; class
# identity must come from shape and motion, never from colour
FOREGROUND_RGB = np.array([0.95, 0.8, 0.25])


def _bright_color(rng: np.random.Generator) -> np.ndarray:
    return np.clip(FOREGROUND_RGB + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)


@dataclass
class RenderedSample:
    frames: np.ndarray
    masks: np.ndarray
    background: np.ndarray   # [3, H, W], after crop and colour jitter


def render_sample(cls: ClassSpec, cfg: GenerationConfig, rng: np.random.Generator) -> RenderedSample:
    """Render one video at ``render_size`` and crop it to ``size``.

    Meta-train samples get a random crop and brightness jitter; meta-test
    samples are centre-cropped and unjittered.
    """
    R, S, Tn = cfg.render_size, cfg.size, cfg.t_raw
    center = R / 2.0
    bg = background_texture(rng, R)
    fg_params = _object_params(rng)
    fg_color = _bright_color(rng)
    distractors = []
    for _ in range(cls.distractors.count):
        shape = cls.shape if cls.distractors.share_shape else SHAPES[rng.integers(len(SHAPES))]
        traj = cls.trajectory if cls.distractors.share_trajectory \
            else TRAJECTORIES[rng.integers(len(TRAJECTORIES))]
        params = _object_params(rng)
        params["offset"] = (float(rng.uniform(-7, 7)), float(rng.uniform(-7, 7)))
        col = np.full(3, cfg.distractor_value) + rng.uniform(-0.08, 0.08, size=3)
        distractors.append((shape, traj, params, col))

    if cls.split == "train":
        oy, ox = (int(v) for v in rng.integers(0, R - S + 1, size=2))
        gain = 1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter)
    else:
        oy = ox = (R - S) // 2
        gain = 1.0

    bg = np.clip(bg * gain, 0.0, 1.0)
    fg_color = np.clip(fg_color * gain, 0.0, 1.0)
    distractors = [(s, t, p, np.clip(c * gain, 0.0, 1.0)) for s, t, p, c in distractors]

    fg_path = trajectory_points(cls.trajectory, Tn, fg_params, center)
    d_paths = [trajectory_points(t, Tn, p, center) for _, t, p, _ in distractors]
    frames = np.empty((Tn, 3, S, S))
    masks = np.empty((Tn, 1, S, S), dtype=np.uint8)
    for f in range(Tn):
        img = bg.copy()
        for (shape, _, _, col), path in zip(distractors, d_paths):
            x, y, sc = path[f]
            cov = coverage(shape, x, y, sc, R)
            img[:, cov] = col[:, None]
        x, y, sc = fg_path[f]
        cov = coverage(cls.shape, x, y, sc, R)
        img[:, cov] = fg_color[:, None]
        frames[f] = img[:, oy:oy + S, ox:ox + S]
        masks[f, 0] = cov[oy:oy + S, ox:ox + S]
    if cfg.mask_flip_noise > 0:
        flips = rng.random(masks.shape) < cfg.mask_flip_noise
        masks = np.where(flips, 1 - masks, masks).astype(np.uint8)
    return RenderedSample(frames, masks, bg[:, oy:oy + S, ox:ox + S])


# ----------------------------------------------------------------------------
# dataset on disk


def build_classes(cfg: GenerationConfig, rng: np.random.Generator) -> list[ClassSpec]:
    pairs = [(s, t) for s in SHAPES for t in TRAJECTORIES]
    order = rng.permutation(len(pairs))
    n = cfg.n_train_classes + cfg.n_test_classes
    pool = []
    for _ in range(cfg.distractor_policies):
        share = rng.integers(0, 3)   # 0: neither, 1: shape, 2: trajectory
        pool.append(DistractorPolicy(cfg.distractors, bool(share == 1), bool(share == 2)))
    classes = []
    for cid in range(n):
        shape, traj = pairs[order[cid]]
        split = "train" if cid < cfg.n_train_classes else "test"
        policy = pool[int(rng.integers(len(pool)))] if cid >= len(pool) else pool[cid]
        classes.append(ClassSpec(cid, shape, traj, split, policy))
    keys = [(c.shape, c.trajectory) for c in classes]
    assert len(set(keys)) == len(keys), "duplicate (shape, trajectory) class"
    policies = [c.distractors for c in classes]
    assert len(set(policies)) < len(policies), "no two classes share a distractor configuration"
    return classes


def write_sample(path: Path, frames: np.ndarray, masks: np.ndarray) -> None:
    t, c, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(t, c, h, w))
        fh.write(frames.astype("<f4").tobytes())
        fh.write(masks.astype(np.uint8).tobytes())


def read_sample(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IOError(f"{path}: truncated header")
    t, c, h, w = _HEADER.unpack_from(raw)
    nf = t * c * h * w
    expect = _HEADER.size + 4 * nf + t * h * w
    if len(raw) != expect:
        raise IOError(f"{path}: expected {expect} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", count=nf, offset=_HEADER.size).reshape(t, c, h, w)
    masks = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size + 4 * nf).reshape(t, 1, h, w)
    return frames, masks


def generate_dataset(cfg: GenerationConfig, seed: int, out: str | Path) -> Path:
    """Render the whole dataset; output is a deterministic function of ``(cfg, seed)``."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = build_classes(cfg, rng)
    manifest_classes = []
    for cls in classes:
        ids = []
        for j in range(cfg.samples_per_class):
            sid = cls.class_id * cfg.samples_per_class + j
            r = render_sample(cls, cfg, rng)
            write_sample(out / f"{cls.class_id}_{sid}.bin", r.frames, r.masks)
            ids.append(sid)
        entry = dataclasses.asdict(cls)
        entry["sample_ids"] = ids
        manifest_classes.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "t_raw": cfg.t_raw,
        "height": cfg.size,
        "width": cfg.size,
        "generation": dataclasses.asdict(cfg),
        "classes": manifest_classes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return out


class Dataset:
    """Read-only view of a generated dataset directory with a sample cache."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(path.read_text(encoding="utf-8"))
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {self.manifest.get('version')}")
        self.t_raw = self.manifest["t_raw"]
        self.classes = {c["class_id"]: c for c in self.manifest["classes"]}
        self._cache: dict[int, VideoSample] = {}
        self._owner = {sid: cid for cid, c in self.classes.items() for sid in c["sample_ids"]}

    def split_classes(self, split: str) -> list[int]:
        if split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
        return sorted(cid for cid, c in self.classes.items() if c["split"] == split)

    def load(self, sample_id: int) -> VideoSample:
        hit = self._cache.get(sample_id)
        if hit is None:
            cid = self._owner[sample_id]
            frames, masks = read_sample(self.root / f"{cid}_{sample_id}.bin")
            hit = VideoSample(frames, masks, cid, sample_id)
            self._cache[sample_id] = hit
        return hit

    def check_feasible(self, split: str, way: int, shot: int, query: int) -> None:
        if way < 2:
            raise ConfigError(f"way must be >= 2, got {way}")
        if shot < 1 or query < 1:
            raise ConfigError("shot and query must be >= 1")
        cids = self.split_classes(split)
        if len(cids) < way:
            raise ConfigError(f"split {split!r} has {len(cids)} classes, {way}-way requested")
        short = [c for c in cids if len(self.classes[c]["sample_ids"]) < shot + query]
        if short:
            raise ConfigError(f"classes {short} have fewer than K+Q = {shot + query} samples")


def sample_episode(ds: Dataset, split: str, way: int, shot: int, query: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``way`` classes and ``shot + query`` samples per class, all without replacement."""
    ds.check_feasible(split, way, shot, query)
    cids = ds.split_classes(split)
    chosen = [cids[i] for i in rng.choice(len(cids), size=way, replace=False)]
    support, s_lab, queries, q_lab = [], [], [], []
    for label, cid in enumerate(chosen):
        ids = ds.classes[cid]["sample_ids"]
        pick = [ids[i] for i in rng.choice(len(ids), size=shot + query, replace=False)]
        support += [(cid, s) for s in pick[:shot]]
        s_lab += [label] * shot
        queries += [(cid, s) for s in pick[shot:]]
        q_lab += [label] * query
    return Episode(way, shot, query, chosen, support, s_lab, queries, q_lab)


def segment_bounds(t_raw: int, t: int) -> list[tuple[int, int]]:
    """``t`` contiguous segments; the remainder goes one frame each to the leading segments."""
    base, rem = divmod(t_raw, t)
    out, start = [], 0
    for i in range(t):
        n = base + (1 if i < rem else 0)
        out.append((start, start + n))
        start += n
    return out


def sparse_frame_indices(t_raw: int, t: int, train: bool = False,
                         rng: np.random.Generator | None = None) -> list[int]:
    if not 1 <= t <= t_raw:
        raise ConfigError(f"need 1 <= T <= T_raw, got T={t}, T_raw={t_raw}")
    bounds = segment_bounds(t_raw, t)
    if train:
        if rng is None:
            raise ConfigError("training-mode frame sampling needs an rng")
        return [int(rng.integers(a, b)) for a, b in bounds]
    return [a + (b - a) // 2 for a, b in bounds]


def sparse_sample_frames(video: VideoSample, t: int, train: bool = False,
                         rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pick one frame per segment; returns float64 ``frames [T,3,H,W]`` and ``masks [T,1,H,W]``."""
    idx = sparse_frame_indices(video.frames.shape[0], t, train, rng)
    return (video.frames[idx].astype(np.float64), video.masks[idx].astype(np.float64))
