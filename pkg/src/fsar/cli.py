"""Command-line entry point: ``fsar {gen-data,train,eval,gradcheck,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from fsar import tensor as T
from fsar.checkpoint import load_checkpoint
from fsar.config import GenerationConfig, TrainConfig, load_config
from fsar.data import Dataset, generate_dataset, sparse_sample_frames
from fsar.errors import CheckpointVersionError, ConfigError, ContractError, DimensionError, NonFiniteLossError
from fsar.runtime import dump_record, eval_view, evaluate, train

log = logging.getLogger("fsar")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {text}")
    return v


def cmd_gen_data(args) -> int:
    cfg = load_config(GenerationConfig, args.spec) if args.spec else GenerationConfig()
    cfg.validate()
    t0 = time.perf_counter()
    out = generate_dataset(cfg, args.seed, args.out)
    log.info("wrote dataset to %s in %.1fs", out, time.perf_counter() - t0)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(TrainConfig, args.config)
    changes = {}
    if args.dataset:
        changes["dataset"] = args.dataset
    if args.episodes is not None:
        changes["train_episodes"] = args.episodes
    if args.mask_weight is not None:
        changes["mask_weight"] = args.mask_weight
    cfg = cfg.replace(**changes) if changes else cfg
    if not cfg.dataset:
        raise ConfigError("no dataset: set 'dataset' in the config or pass --dataset")
    t0 = time.perf_counter()

    def progress(rec):
        n = rec["episode"] + 1
        if n % 100 == 0:
            log.info("episode %d  ce %.4f  mask %s  %.0fs", n, rec["ce"],
                     "-" if rec["mask_loss"] is None else f"{rec['mask_loss']:.4f}",
                     time.perf_counter() - t0)

    train(cfg, args.out, progress=progress)
    log.info("trained %d episodes into %s", cfg.train_episodes, args.out)
    return 0


def _dataset_for(ckpt_cfg: TrainConfig, override: str | None) -> Dataset:
    root = override or ckpt_cfg.dataset
    if not root:
        raise ConfigError("checkpoint names no dataset; pass --dataset")
    return Dataset(root)


def cmd_eval(args) -> int:
    model, ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for(ckpt.config, args.dataset)
    view = eval_view(model, frames=args.frames,
                     instance=False if args.no_instance else None,
                     spatial=False if args.no_spatial else None,
                     temporal=False if args.no_temporal else None,
                     local_only=args.local_only)
    out = sys.stdout

    def sink(rec):
        if args.per_episode:
            out.write(dump_record(rec) + "\n")

    metrics = evaluate(view, ds, args.split, args.way, args.shot, args.query, args.episodes, args.seed, sink)
    summary = metrics.summary()
    summary.update(way=args.way, shot=args.shot, frames=view.cfg.frames)
    out.write(json.dumps(summary) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from fsar.diagnostics import MODULE_GROUPS, run_gradcheck

    t0 = time.perf_counter()
    groups = list(MODULE_GROUPS) if args.module == "all" else [args.module]
    ok = True
    for result in run_gradcheck(groups, eps=args.eps, seed=args.seed):
        status = "PASS" if result.passed else "FAIL"
        ok &= result.passed
        plain = "" if result.max_rel_error_unfrozen is None else \
            f"  plain-diff {result.max_rel_error_unfrozen:.1e}"
        print(f"{status} {result.group:<8} {result.name:<32} max_rel {result.max_rel_error:.2e} "
              f"(tol {result.tol:.0e}, {result.n_coords} coords){plain}")
    print(f"{'PASS' if ok else 'FAIL'} all  ({time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


def _write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def cmd_inspect(args) -> int:
    model, ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for(ckpt.config, args.dataset)
    video = ds.load(args.sample)
    frames, masks = sparse_sample_frames(video, model.cfg.frames, False, None)
    info = {"sample": args.sample, "class_id": video.class_id,
            "class": {k: ds.classes[video.class_id][k] for k in ("shape", "trajectory")},
            "frames": model.cfg.frames}
    if args.dump_masks:
        if not model.cfg.instance:
            raise ConfigError("checkpoint has no instance stream; there are no masks to dump")
        with T.no_grad():
            pred = model.encode(frames[None], decode_masks=True).masks.data[0]
        out = Path(args.dump_masks)
        out.mkdir(parents=True, exist_ok=True)
        for t in range(pred.shape[0]):
            _write_pgm(out / f"sample{args.sample}_t{t}_pred.pgm", pred[t, 0])
            _write_pgm(out / f"sample{args.sample}_t{t}_teacher.pgm", masks[t, 0])
        info["mask_mse"] = float(np.mean((pred - masks) ** 2))
        info["dumped"] = str(out)
    print(json.dumps(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--spec", help="key = value generation recipe (defaults if omitted)")
    g.add_argument("--seed", type=_u64, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--dataset", help="override the config's dataset path")
    t.add_argument("--episodes", type=int, help="override train_episodes")
    t.add_argument("--mask-weight", type=float, help="override mask_weight (lambda)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="many-episode evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="override the dataset path stored in the checkpoint")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--way", type=int, default=3)
    e.add_argument("--shot", type=int, default=1)
    e.add_argument("--query", type=int, default=2)
    e.add_argument("--episodes", type=int, default=300)
    e.add_argument("--seed", type=_u64, default=1)
    e.add_argument("--frames", type=int)
    e.add_argument("--no-instance", action="store_true")
    e.add_argument("--no-spatial", action="store_true")
    e.add_argument("--no-temporal", action="store_true")
    e.add_argument("--local-only", action="store_true")
    e.add_argument("--per-episode", action="store_true", help="also emit one JSON record per episode")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    c.add_argument("--module", choices=("all", "backbone", "ipm", "sam", "match"), default="all")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="describe a sample and dump predicted masks as PGM")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--sample", type=int, required=True)
    i.add_argument("--dump-masks", metavar="DIR")
    i.add_argument("--dataset")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, ContractError, CheckpointVersionError,
            NonFiniteLossError, FileNotFoundError, IOError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
