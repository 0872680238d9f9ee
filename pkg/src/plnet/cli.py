"""``plnet`` command line: params, train, eval, predict, synth, split.

Exit codes: 0 success, 2 usage/config/data error, 3 numeric failure.

Quickstart on synthetic data::

    plnet synth --out data/synth --count 250 --size 64
    plnet train --data data/synth --out runs/tiny --ocs 0.25 --epochs 30 --input-size 64
    plnet eval --checkpoint runs/tiny/best.ckpt --data data/synth --split-file runs/tiny/split.tsv
    plnet predict --checkpoint runs/tiny/best.ckpt --image data/synth/images/synth_00000.png --out pred/
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from . import data_io, metrics
from . import nn_ops as ops
from .arch_graph import count_parameters, describe, build
from .checkpoint import Checkpoint, CheckpointError, build_model, from_snapshot
from .model_runtime import Model, predict, save_prediction
from .nn_ops import ConfigurationError, Tensor
from .training import NumericError, TrainHistory, train_epl

log = logging.getLogger("plnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
USAGE_ERRORS = (cfgmod.ConfigError, ConfigurationError, data_io.DatasetError, CheckpointError,
                FileNotFoundError, ValueError)


class UsageError(Exception):
    pass


def _seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("PLNET_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"PLNET_SEED must be an integer, got {env!r}") from None


def resolve_config(args) -> cfgmod.RunConfig:
    over = {
        "ocs": getattr(args, "ocs", None),
        "steps": getattr(args, "steps", None),
        "variant": getattr(args, "variant", None),
        "seed": _seed(args),
        "data": getattr(args, "data", None),
        "out": getattr(args, "out", None),
        "epochs": getattr(args, "epochs", None),
        "threads": getattr(args, "threads", None),
        "input_size": getattr(args, "input_size", None),
        "split_file": getattr(args, "split_file", None),
        "fold": getattr(args, "fold", None),
    }
    if getattr(args, "no_epl", False):
        over["epl"] = False
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        over[k.strip()] = v
    return cfgmod.load(args.config, **over)


# -- commands ---------------------------------------------------------------

def cmd_params(args) -> int:
    cfg = resolve_config(args)
    graph = build(cfg.network())
    if args.describe:
        print(describe(graph), end="")
    print(count_parameters(graph).format())
    return EXIT_OK


def _splits(cfg, ds):
    if cfg.split_file:
        plan = data_io.SplitPlan.load(cfg.split_file)
    else:
        plan = data_io.kfold_split(ds.ids, cfg.k, cfg.seed)
    unknown = set(plan.folds) - set(ds.ids)
    if unknown:
        raise data_io.DatasetError(f"split lists ids missing from the data: {sorted(unknown)[:5]}")
    return plan


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg.data:
        raise UsageError("train needs --data (see `plnet synth` for a synthetic set)")
    net, tcfg, aug = cfg.network(), cfg.train(), cfg.augmentation()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")

    ds = data_io.load_dataset(cfg.data, size=net.input_size, gray_world=cfg.gray_world)
    plan = _splits(cfg, ds)
    plan.save(out / "split.tsv")
    train_ids, val_ids = plan.train_val(cfg.fold)
    log.info("train %d / val %d samples, fold %d of %d", len(train_ids), len(val_ids), cfg.fold, plan.k)

    model = Model.from_config(net, seed=cfg.seed)
    hist_path = out / "history.jsonl"
    hist_path.write_text("")

    def on_epoch(rec):
        with open(hist_path, "a") as f:
            f.write(TrainHistory([rec]).to_jsonl())

    result = train_epl(model, ds.subset(train_ids), ds.subset(val_ids), tcfg, aug, on_epoch)
    meta = {"gray_world": cfg.gray_world, "seed": cfg.seed, "fold": cfg.fold}
    from_snapshot(result.best, net, meta).save(out / "best.ckpt")
    from_snapshot(result.last, net, meta).save(out / "last.ckpt")
    result.history.save(hist_path)
    log.info("stopped (%s); best epoch %d val loss %.4f", result.history.stop_reason,
             result.best.epoch, result.best.val_loss)
    print(out / "best.ckpt")
    return EXIT_OK


def _check_consistent(args, ckpt: Checkpoint) -> None:
    for flag, key in (("ocs", "ocs"), ("steps", "steps_n"), ("variant", "variant")):
        v = getattr(args, flag, None)
        if v is not None and v != ckpt.config[key]:
            raise UsageError(f"--{flag} {v} conflicts with checkpoint {key}={ckpt.config[key]}")


def cmd_eval(args) -> int:
    ckpts = [Checkpoint.load(p) for p in args.checkpoint]
    per_fold, per_sample = [], []
    for i, ck in enumerate(ckpts):
        _check_consistent(args, ck)
        model = build_model(ck)
        ds = data_io.load_dataset(args.data, size=model.config.input_size,
                                  gray_world=ck.meta.get("gray_world", True))
        if args.split_file:
            plan = data_io.SplitPlan.load(args.split_file)
            fold = args.fold + i if len(ckpts) > 1 else args.fold
            ds = ds.subset(plan.fold_ids(fold))
        scores = []
        for start in range(0, len(ds), args.batch_size):
            x, y = ds.arrays(range(start, min(len(ds), start + args.batch_size)))
            scores += metrics.score_batch(predict(model, Tensor(x)), y)
        per_sample.append(scores)
        per_fold.append(metrics.mean_metrics(scores))
    report = metrics.aggregate(per_fold, per_sample)
    print(report.table())
    if args.report:
        Path(args.report).write_text(report.to_jsonl())
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    model = build_model(ck)
    try:
        img = data_io.read_image(args.image)
    except OSError as e:
        raise UsageError(f"cannot read image {args.image}: {e}") from None
    h, w = img.shape[1:]
    size = model.config.input_size
    s = data_io.Sample("x", img, np.zeros((h, w), np.uint8))
    s = data_io.preprocess(s, size, ck.meta.get("gray_world", True))
    with ops.Tape(grad=False) as tape:
        prob = predict(model, Tensor(s.image[None]))[0, 0]
    counts = tape.op_counts()
    log.info("op trace: %d ops, sigmoid x%d", len(tape.records), counts["sigmoid"])
    if (h, w) != (size, size):
        from PIL import Image
        prob = np.asarray(Image.fromarray(prob.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        prob = np.clip(prob, 0, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_prediction(prob, out / f"{stem}_prob.png", out / f"{stem}_mask.png")
    print(out / f"{stem}_mask.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = _seed(args) or 0
    ds = data_io.synth_generate(args.count, args.size, seed, args.difficulty)
    data_io.save_dataset(ds, args.out)
    print(f"{len(ds)} samples -> {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    seed = _seed(args) or 0
    ids = sorted(p.stem for p in (Path(args.data) / "images").glob("*.png"))
    plan = data_io.kfold_split(ids, args.k, seed)
    plan.save(args.out)
    print(f"{len(ids)} ids in {args.k} folds -> {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _net_flags(p):
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--ocs", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=("plnet", "unet"))
    p.add_argument("--input-size", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plnet", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="parameter breakdown and model size")
    _net_flags(p)
    p.add_argument("--describe", action="store_true", help="also list every node")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train with the two-phase schedule")
    _net_flags(p)
    p.add_argument("--no-epl", action="store_true", help="single joint phase from scratch")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--split-file", metavar="PATH")
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints (one per fold) on a dataset")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split-file", metavar="PATH")
    p.add_argument("--fold", type=int, default=0, help="fold of the first checkpoint")
    p.add_argument("--report", metavar="PATH", help="write per-fold records as JSON lines")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--ocs", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=("plnet", "unet"))
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="probability map and mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write a synthetic lesion dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a k-fold split plan")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_split)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = getattr(args, "threads", None)
    try:
        if args.command == "train" and threads is None:
            threads = resolve_config(args).threads
        with threadpool_limits(limits=threads):
            return args.func(args)
    except NumericError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (UsageError, *USAGE_ERRORS) as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
