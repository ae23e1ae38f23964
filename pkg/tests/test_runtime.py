import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsar import runtime
from fsar import tensor as T
from fsar.checkpoint import MAGIC, decode, encode, load_checkpoint, restore, save_checkpoint, snapshot
from fsar.cli import main
from fsar.config import TrainConfig, dump_kv, load_config, parse_kv
from fsar.data import sample_episode
from fsar.errors import CheckpointVersionError, ConfigError, ContractError, DimensionError, NonFiniteLossError
from fsar.model import build_model
from fsar.runtime import (cross_entropy, episode_forward, episode_seed, eval_view, evaluate,
                          load_episode_frames, train, train_iter)
from fsar.tensor import Tensor


def cfg_for(ds, **kw):
    base = dict(dataset=str(ds.root), train_episodes=4, checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


def one_episode(ds, model, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    c = model.cfg
    ep = sample_episode(ds, split, c.way, c.shot, c.query, rng)
    frames, masks = load_episode_frames(ds, ep, c.frames, False, None)
    return ep, frames, masks


# --- cross-entropy ----------------------------------------------------------

def test_cross_entropy_uniform_logits_is_log_n():
    assert cross_entropy(Tensor(np.zeros(5)), 3).item() == pytest.approx(math.log(5), abs=1e-15)
    assert cross_entropy(Tensor(np.full((4, 3), 2.5)), [0, 1, 2, 0]).item() == pytest.approx(math.log(3), abs=1e-15)


def _ce_mp(row, label):
    mpmath.mp.dps = 50
    xs = [mpmath.mpf(float(v)) for v in row]
    return float(mpmath.log(mpmath.fsum(mpmath.exp(x) for x in xs)) - xs[label])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cross_entropy_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    q, n = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = rng.standard_normal((q, n)) * rng.uniform(0.1, 30)
    labels = rng.integers(0, n, q)
    want = np.mean([_ce_mp(logits[i], labels[i]) for i in range(q)])
    assert abs(cross_entropy(Tensor(logits), labels).item() - want) <= 1e-12 * max(1.0, abs(want))


def test_cross_entropy_label_errors():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


# --- one episode -------------------------------------------------------------

def test_episode_forward_shapes_and_loss_decomposition(tiny_ds):
    model = build_model(cfg_for(tiny_ds), 0)
    ep, frames, masks = one_episode(tiny_ds, model)
    with T.no_grad():
        out = episode_forward(ep, model, frames, masks)
        bare = episode_forward(ep, model, frames, masks, mask_weight=0.0)
        nomask = episode_forward(ep, model, frames, None)
    assert out.scores.shape == (3 * 2, 3)
    assert out.total.item() == pytest.approx(out.ce.item() + 1.0 * out.mask.item(), abs=1e-15)
    assert bare.total.item() == bare.ce.item() == out.ce.item()
    assert nomask.mask is None and nomask.total.item() == out.ce.item()


def test_logit_scale_only_touches_the_cross_entropy(tiny_ds):
    a = build_model(cfg_for(tiny_ds, logit_scale=1.0), 0)
    b = build_model(cfg_for(tiny_ds, logit_scale=5.0), 0)
    ep, frames, masks = one_episode(tiny_ds, a)
    with T.no_grad():
        oa, ob = episode_forward(ep, a, frames, masks), episode_forward(ep, b, frames, masks)
    assert np.array_equal(oa.scores.data, ob.scores.data)
    assert ob.ce.item() == pytest.approx(cross_entropy(Tensor(5.0 * oa.scores.data), oa.labels).item(), abs=1e-14)


def test_support_order_does_not_change_scores(tiny_ds):
    model = build_model(cfg_for(tiny_ds, shot=2, query=1), 0)
    ep, frames, masks = one_episode(tiny_ds, model)
    # swap the two shots of class 0
    order = [1, 0] + list(range(2, len(frames)))
    with T.no_grad():
        a = episode_forward(ep, model, frames, masks).scores.data
        b = episode_forward(ep, model, frames[order], masks[order]).scores.data
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_no_instance_model_has_no_mask_term(tiny_ds):
    model = build_model(cfg_for(tiny_ds, instance=False), 0)
    ep, frames, masks = one_episode(tiny_ds, model)
    with T.no_grad():
        out = episode_forward(ep, model, frames, masks)
    assert out.mask is None and out.total.item() == out.ce.item()


def test_auxiliary_hook_adds_to_total(tiny_ds, monkeypatch):
    model = build_model(cfg_for(tiny_ds), 0)
    ep, frames, masks = one_episode(tiny_ds, model)
    with T.no_grad():
        base = episode_forward(ep, model, frames, masks).total.item()
        monkeypatch.setattr(runtime, "auxiliary_loss", lambda enc, ep: Tensor(np.array(0.5)))
        extra = episode_forward(ep, model, frames, masks).total.item()
    assert extra == pytest.approx(base + 0.5, abs=1e-15)


# --- training ----------------------------------------------------------------

def test_episode_seed_is_stable_and_distinct():
    assert episode_seed(0, 5) == episode_seed(0, 5)
    assert len({episode_seed(0, i) for i in range(100)}) == 100
    assert episode_seed(0, 1) != episode_seed(1, 0)


def test_identical_runs_write_identical_metrics(tiny_ds, tmp_path):
    cfg = cfg_for(tiny_ds)
    train(cfg, tmp_path / "a", tiny_ds)
    train(cfg, tmp_path / "b", tiny_ds)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "model.i2st").read_bytes() == (tmp_path / "b" / "model.i2st").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert [r["episode"] for r in rows] == [0, 1, 2, 3]
    assert all(r["split"] == "train" and 0 <= r["acc"] <= 1 for r in rows)


def test_resume_continues_the_same_stream(tiny_ds, tmp_path):
    cfg = cfg_for(tiny_ds, train_episodes=6, checkpoint_every=3)
    full = train(cfg, tmp_path / "full", tiny_ds)
    resumed = [rec for rec, _, _ in runtime.resume(tmp_path / "full" / "ckpt_000003.i2st", tiny_ds)]
    assert [r["episode"] for r in resumed] == [3, 4, 5]
    assert resumed == full.records[3:]


def test_train_updates_every_parameter(tiny_ds):
    cfg = cfg_for(tiny_ds, train_episodes=2)
    before = build_model(cfg).state_dict()
    after = train(cfg, None, tiny_ds).model.state_dict()
    unchanged = [k for k in before if np.array_equal(before[k], after[k])]
    assert not unchanged


def test_episodes_per_step_accumulates(tiny_ds):
    cfg = cfg_for(tiny_ds, train_episodes=2, episodes_per_step=2)
    res = train(cfg, None, tiny_ds)
    assert res.optimizer.t == 1


def test_non_finite_loss_aborts_with_episode_seed(tiny_ds, monkeypatch):
    cfg = cfg_for(tiny_ds)
    monkeypatch.setattr(runtime, "auxiliary_loss", lambda enc, ep: Tensor(np.array(np.nan)))
    with pytest.raises(NonFiniteLossError) as info:
        next(train_iter(cfg, tiny_ds))
    assert info.value.episode == 0 and info.value.episode_seed == episode_seed(cfg.train_seed, 0)


# --- evaluation --------------------------------------------------------------

def test_evaluate_is_deterministic_and_leaves_parameters(tiny_ds):
    model = build_model(cfg_for(tiny_ds), 0)
    before = {k: v.tobytes() for k, v in model.state_dict().items()}
    recs_a, recs_b = [], []
    a = evaluate(model, tiny_ds, episodes=5, seed=3, sink=recs_a.append)
    b = evaluate(model, tiny_ds, episodes=5, seed=3, sink=recs_b.append)
    assert recs_a == recs_b and a.accs == b.accs
    assert {k: v.tobytes() for k, v in model.state_dict().items()} == before
    assert a.summary()["episodes"] == 5 and 0.0 <= a.mean_acc <= 1.0 and a.ci95 >= 0


def test_evaluate_rejects_bad_requests(tiny_ds):
    model = build_model(cfg_for(tiny_ds), 0)
    with pytest.raises(ConfigError):
        evaluate(model, tiny_ds, way=1, episodes=1)
    with pytest.raises(ConfigError):
        evaluate(model, tiny_ds, way=6, episodes=1)
    with pytest.raises(ConfigError):
        evaluate(eval_view(model, frames=9), tiny_ds, episodes=1)


def test_eval_toggles_change_scores(tiny_ds):
    model = build_model(cfg_for(tiny_ds), 0)
    ep, frames, _ = one_episode(tiny_ds, model, split="test")
    views = {"full": model, "no_instance": eval_view(model, instance=False),
             "no_spatial": eval_view(model, spatial=False), "no_temporal": eval_view(model, temporal=False),
             "local_only": eval_view(model, local_only=True), "frames6": eval_view(model, frames=6)}
    with T.no_grad():
        base = episode_forward(ep, model, frames, None).scores.data
        for name, view in views.items():
            if name in ("full", "frames6"):
                continue
            s = episode_forward(ep, view, frames, None).scores.data
            assert not np.allclose(s, base), name
        f6, _ = load_episode_frames(tiny_ds, ep, 6, False, None)
        assert episode_forward(ep, views["frames6"], f6, None).scores.shape == base.shape
    assert model.fusion.pos.shape[0] == 5 and views["frames6"].fusion.pos.shape[0] == 7
    assert eval_view(model) is model


def test_eval_view_cannot_enable_missing_parts(tiny_ds):
    model = build_model(cfg_for(tiny_ds, instance=False), 0)
    with pytest.raises(ConfigError):
        eval_view(model, instance=True)


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(tiny_ds, tmp_path):
    res = train(cfg_for(tiny_ds, train_episodes=2), None, tiny_ds)
    path = save_checkpoint(res.model, tmp_path / "m.i2st", res.optimizer, 2)
    model, ckpt = load_checkpoint(path)
    assert ckpt.episode == 2 and ckpt.config == res.model.cfg
    ep, frames, masks = one_episode(tiny_ds, model, split="test")
    with T.no_grad():
        a = episode_forward(ep, res.model, frames, masks)
        b = episode_forward(ep, model, frames, masks)
    assert a.scores.data.tobytes() == b.scores.data.tobytes()
    assert a.total.data.tobytes() == b.total.data.tobytes()
    _, opt = restore(ckpt)
    assert opt.t == res.optimizer.t
    assert all(np.array_equal(x, y) for x, y in zip(opt.m, res.optimizer.m))


def test_checkpoint_header_layout(tiny_ds):
    buf = encode(snapshot(build_model(cfg_for(tiny_ds), 0)))
    assert buf[:4] == MAGIC == b"I2ST"
    assert int.from_bytes(buf[4:8], "little") == 1


def test_checkpoint_refuses_corruption(tiny_ds):
    buf = encode(snapshot(build_model(cfg_for(tiny_ds), 0)))
    with pytest.raises(CheckpointVersionError):
        decode(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointVersionError):
        decode(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(IOError):
        decode(buf[:-3])
    with pytest.raises(IOError):
        decode(buf + b"\0")


def test_checkpoint_refuses_mismatched_shapes(tiny_ds):
    ckpt = snapshot(build_model(cfg_for(tiny_ds), 0))
    name = next(iter(ckpt.tensors))
    ckpt.tensors[name] = ckpt.tensors[name][..., :1]
    with pytest.raises(DimensionError):
        restore(decode(encode(ckpt)))
    ckpt = snapshot(build_model(cfg_for(tiny_ds), 0))
    ckpt.config = ckpt.config.replace(instance=False)
    with pytest.raises(DimensionError):
        restore(ckpt)


# --- config files --------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = TrainConfig(dataset="/x", way=5, instance=False, lr=3e-4)
    p = tmp_path / "c.cfg"
    p.write_text("# header\n" + dump_kv(cfg))
    assert load_config(TrainConfig, p) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_kv("way 3")
    with pytest.raises(ConfigError):
        parse_kv("way = 3\nway = 4")
    p = tmp_path / "c.cfg"
    for text in ("wayy = 3", "way = three", "instance = maybe", "way = 1", "logit_scale = 0"):
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_config(TrainConfig, p)
    with pytest.raises(ConfigError):
        TrainConfig(instance=False, spatial=False, temporal=False).validate()
    with pytest.raises(ConfigError):
        TrainConfig(channels=10, heads=4).validate()


# --- command line --------------------------------------------------------------

def test_cli_train_eval_inspect(tiny_ds, tmp_path, capsys):
    cfgp = tmp_path / "run.cfg"
    cfgp.write_text(f"dataset = {tiny_ds.root}\ntrain_episodes = 2\ncheckpoint_every = 0\n")
    assert main(["train", "--config", str(cfgp), "--out", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / "model.i2st")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--episodes", "3", "--per-episode"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    summary = json.loads(lines[-1])
    assert summary["episodes"] == 3 and summary["way"] == 3 and summary["frames"] == 4
    sid = tiny_ds.classes[tiny_ds.split_classes("test")[0]]["sample_ids"][0]
    assert main(["inspect", "--checkpoint", ckpt, "--sample", str(sid), "--dump-masks", str(tmp_path / "m")]) == 0
    info = json.loads(capsys.readouterr().out)
    pgm = (tmp_path / "m" / f"sample{sid}_t0_pred.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n") and len(pgm) == len(b"P5\n32 32\n255\n") + 32 * 32
    assert info["frames"] == 4 and info["mask_mse"] >= 0


def test_cli_reports_errors_with_exit_code(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.i2st")]) == 2
    bad = tmp_path / "bad.i2st"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["eval", "--checkpoint", str(bad)]) == 2


def test_cli_gen_data(tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("n_train_classes = 5\nn_test_classes = 5\nsamples_per_class = 10\nt_raw = 4\n")
    assert main(["gen-data", "--spec", str(spec), "--seed", "3", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "manifest.json").exists()
    spec.write_text("n_test_classes = 2\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "e")]) == 2


def test_cli_gradcheck_single_group(capsys):
    assert main(["gradcheck", "--module", "match"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].startswith("PASS all") and all(line.startswith("PASS") for line in out)
