import filecmp
import json
import math
import struct

import numpy as np
import pytest

from fsar.config import GenerationConfig
from fsar.data import (BASE_RADIUS, ClassSpec, Dataset, DistractorPolicy, VideoSample, build_classes,
                       coverage, generate_dataset, read_sample, render_sample, sample_episode,
                       segment_bounds, sparse_frame_indices, sparse_sample_frames, trajectory_points,
                       write_sample)
from fsar.errors import ConfigError

SMALL = GenerationConfig(n_train_classes=6, n_test_classes=6, samples_per_class=10, t_raw=8,
                         max_way=5, max_shot=5, max_query=5)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    return Dataset(generate_dataset(SMALL, 7, tmp_path_factory.mktemp("ds")))


def test_same_seed_gives_byte_identical_trees(tmp_path):
    a = generate_dataset(SMALL, 3, tmp_path / "a")
    b = generate_dataset(SMALL, 3, tmp_path / "b")
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors and len(match) == 6 * 10 + 6 * 10 + 1


def test_different_seed_changes_content(tmp_path):
    a = generate_dataset(SMALL, 3, tmp_path / "a")
    b = generate_dataset(SMALL, 4, tmp_path / "b")
    assert (a / "manifest.json").read_bytes() != (b / "manifest.json").read_bytes()


def _disc_circular(split="test", distractors=0):
    return ClassSpec(0, "disc", "circular", split, DistractorPolicy(distractors, False, False))


def test_disc_mask_area_matches_circle_area():
    cfg = GenerationConfig(distractors=0)
    r = render_sample(_disc_circular(), cfg, np.random.default_rng(0))
    rad = BASE_RADIUS
    counts = r.masks.reshape(cfg.t_raw, -1).sum(axis=1)
    # pixel-centre rasterisation differs from pi r^2 by at most the boundary pixels
    for c in counts:
        assert abs(int(c) - math.pi * rad * rad) <= 2 * math.pi * rad


def test_mask_equals_footprint_from_coverage_test():
    cfg = GenerationConfig(distractors=2)
    rng = np.random.default_rng(5)
    cls = _disc_circular(distractors=2)
    state = np.random.default_rng(5)
    r = render_sample(cls, cfg, rng)
    # replay the renderer's draws up to the foreground parameters
    from fsar.data import _object_params, background_texture
    background_texture(state, cfg.render_size)
    params = _object_params(state)
    path = trajectory_points("circular", cfg.t_raw, params, cfg.render_size / 2.0)
    off = (cfg.render_size - cfg.size) // 2
    for f, (x, y, sc) in enumerate(path):
        full = coverage("disc", x, y, sc, cfg.render_size)
        assert np.array_equal(r.masks[f, 0].astype(bool), full[off:off + cfg.size, off:off + cfg.size])


def test_zero_distractors_leave_background_untouched():
    cfg = GenerationConfig(distractors=0)
    for split in ("train", "test"):
        r = render_sample(_disc_circular(split), cfg, np.random.default_rng(11))
        off = r.masks[:, 0] == 0
        for f in range(cfg.t_raw):
            assert np.array_equal(r.frames[f][:, off[f]], r.background[:, off[f]])


def test_coverage_shapes_are_centred_and_sized():
    for shape in ("disc", "square", "triangle", "bar"):
        m = coverage(shape, 16.0, 16.0, 1.0, 32)
        ys, xs = np.nonzero(m)
        assert m.any() and abs(xs.mean() - 15.5) < 1.0
    assert coverage("disc", 16, 16, 1.0, 32).sum() < coverage("disc", 16, 16, 1.5, 32).sum()
    with pytest.raises(ValueError):
        coverage("hexagon", 0, 0, 1, 8)


def test_frames_lie_in_unit_interval(small_ds):
    v = small_ds.load(small_ds.classes[0]["sample_ids"][0])
    assert v.frames.min() >= 0.0 and v.frames.max() <= 1.0
    assert set(np.unique(v.masks)) <= {0, 1}
    assert v.frames.shape == (8, 3, 32, 32) and v.masks.shape == (8, 1, 32, 32)


def test_classes_unique_and_splits_disjoint(small_ds):
    keys = [(c["shape"], c["trajectory"]) for c in small_ds.classes.values()]
    assert len(set(keys)) == len(keys)
    train, test = set(small_ds.split_classes("train")), set(small_ds.split_classes("test"))
    assert train and test and not (train & test)


def test_default_classes_share_a_distractor_configuration():
    classes = build_classes(GenerationConfig(), np.random.default_rng(0))
    policies = [c.distractors for c in classes]
    assert len(set(policies)) < len(policies)
    assert len(classes) == 18


def test_manifest_fields(small_ds):
    m = small_ds.manifest
    assert {"version", "seed", "t_raw", "height", "width", "classes"} <= set(m)
    assert m["seed"] == 7 and m["t_raw"] == 8
    for c in m["classes"]:
        assert c["split"] in ("train", "test") and len(c["sample_ids"]) == 10


def test_sample_file_layout(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.random((2, 3, 4, 5)).astype(np.float32)
    masks = (rng.random((2, 1, 4, 5)) > 0.5).astype(np.uint8)
    p = tmp_path / "0_0.bin"
    write_sample(p, frames, masks)
    raw = p.read_bytes()
    assert struct.unpack_from("<4I", raw) == (2, 3, 4, 5)
    assert len(raw) == 16 + 4 * frames.size + masks.size
    assert np.frombuffer(raw, "<f4", count=frames.size, offset=16).tobytes() == frames.tobytes()
    f2, m2 = read_sample(p)
    assert np.array_equal(f2, frames) and np.array_equal(m2, masks)
    p.write_bytes(raw[:-1])
    with pytest.raises(IOError):
        read_sample(p)


def test_generation_rejects_infeasible_specs(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(GenerationConfig(n_test_classes=3, max_way=5), 0, tmp_path)
    with pytest.raises(ConfigError):
        generate_dataset(GenerationConfig(samples_per_class=4, max_shot=5, max_query=5), 0, tmp_path)
    with pytest.raises(ConfigError):
        GenerationConfig(n_train_classes=30, n_test_classes=6).validate()


def test_episode_counts_and_labels(small_ds):
    ep = sample_episode(small_ds, "train", 3, 1, 2, np.random.default_rng(0))
    assert len(ep.support) == 3 and len(ep.queries) == 6
    assert sorted(set(ep.support_labels)) == [0, 1, 2] and sorted(set(ep.query_labels)) == [0, 1, 2]
    assert len(set(ep.classes)) == 3 and set(ep.classes) <= set(small_ds.split_classes("train"))
    sids = [s for _, s in ep.support] + [s for _, s in ep.queries]
    assert len(set(sids)) == len(sids)
    # labels follow class draw order
    for (cid, _), lab in zip(ep.support, ep.support_labels):
        assert ep.classes[lab] == cid


def test_episode_determinism(small_ds):
    a = sample_episode(small_ds, "test", 5, 2, 3, np.random.default_rng(9))
    b = sample_episode(small_ds, "test", 5, 2, 3, np.random.default_rng(9))
    assert a == b


def test_class_frequency_is_uniform(small_ds):
    rng = np.random.default_rng(1)
    counts = dict.fromkeys(small_ds.split_classes("test"), 0)
    for _ in range(1000):
        for cid in sample_episode(small_ds, "test", 3, 1, 1, rng).classes:
            counts[cid] += 1
    # each of 6 classes is drawn with probability 3/6
    for c in counts.values():
        assert 450 <= c <= 550


def test_infeasible_episode_is_config_error(small_ds):
    with pytest.raises(ConfigError):
        sample_episode(small_ds, "test", 7, 1, 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_episode(small_ds, "test", 3, 6, 5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_episode(small_ds, "test", 1, 1, 1, np.random.default_rng(0))


def test_sparse_indices_eval_centres():
    assert sparse_frame_indices(16, 4) == [2, 6, 10, 14]
    assert sparse_frame_indices(16, 16) == list(range(16))
    assert segment_bounds(10, 3) == [(0, 4), (4, 7), (7, 10)]


def test_sparse_indices_train_stay_in_segment():
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx = sparse_frame_indices(13, 4, True, rng)
        for i, (a, b) in zip(idx, segment_bounds(13, 4)):
            assert a <= i < b


def test_sparse_sampling_errors():
    with pytest.raises(ConfigError):
        sparse_frame_indices(16, 17)
    with pytest.raises(ConfigError):
        sparse_frame_indices(16, 0)
    with pytest.raises(ConfigError):
        sparse_frame_indices(16, 4, train=True)


def test_sparse_sample_frames_picks_rows():
    frames = np.arange(16, dtype=np.float32)[:, None, None, None] * np.ones((16, 3, 32, 32), np.float32)
    masks = np.zeros((16, 1, 32, 32), np.uint8)
    f, m = sparse_sample_frames(VideoSample(frames, masks, 0, 0), 4)
    assert f[:, 0, 0, 0].tolist() == [2, 6, 10, 14]
    assert f.dtype == np.float64 and m.shape == (4, 1, 32, 32)


def test_manifest_is_valid_json_with_sorted_keys(small_ds):
    text = (small_ds.root / "manifest.json").read_text()
    assert json.loads(text) == small_ds.manifest
