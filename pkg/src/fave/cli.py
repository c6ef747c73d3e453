"""Command-line entry point: ``fave <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from .bench import bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import DataError, SplitDataset, build_splits, ingest_tsv, make_batch
from .inference import (
    SamplerSpec,
    euler_infer,
    eval_prior,
    evaluate,
    exclusion_mask,
    infer,
    initial_state,
    rank,
)
from .synthetic import transition_log, write_tsv
from .train import TrainingDiverged, model_from_checkpoint, train_stage1, train_stage2


def _load(args):
    expect = TrainConfig.load(args.config) if getattr(args, "config", None) else None
    ckpt = load_checkpoint(args.ckpt, expect=expect)
    split = SplitDataset.read(args.data)
    if split.n_items != int(ckpt.meta["n_items"]):
        raise DataError("checkpoint and data directory disagree on the item count")
    model = model_from_checkpoint(ckpt)
    model.eval()
    torch.set_num_threads(ckpt.config.threads)
    return ckpt, split, model


def cmd_prepare(args) -> int:
    cols = [int(c) for c in args.columns.split(",")] if args.columns else None
    log = ingest_tsv(args.input, columns=cols, skip_header=args.skip_header)
    split = build_splits(log, min_len=args.min_len)
    split.write(args.out)
    print(json.dumps({"users": len(split.sequences), "items": split.n_items,
                      "interactions": int(len(log.users))}, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    log = transition_log(args.users, args.items, args.min_len, args.max_len, seed=args.seed)
    write_tsv(log, args.out)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    split = SplitDataset.read(args.data)
    def persist(ckpt):
        # write-then-rename so an interrupted run never leaves a torn file
        tmp = Path(str(args.out) + ".tmp")
        save_checkpoint(tmp, ckpt)
        tmp.replace(args.out)

    try:
        if args.stage == 1:
            resume = load_checkpoint(args.resume, expect=config) if args.resume else None
            ckpt = train_stage1(split, config, resume=resume, on_checkpoint=persist)
        else:
            if not args.init:
                raise ValueError("--stage 2 needs --init <stage-1 checkpoint>")
            ckpt = train_stage2(split, config, load_checkpoint(args.init, expect=config),
                                on_checkpoint=persist)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(args.out, exc.checkpoint)
        print(f"error: training diverged ({exc}); last good state saved to {args.out}",
              file=sys.stderr)
        return 3
    persist(ckpt)
    return 0


def cmd_eval(args) -> int:
    ckpt, split, model = _load(args)
    sampler = SamplerSpec.parse(args.sampler)
    prior = eval_prior(ckpt.config, ckpt.stage)
    report = evaluate(model, split.view(args.split), prior, sampler,
                      seed=ckpt.config.seed, batch_size=ckpt.config.batch)
    print(report.to_json(per_user=not args.summary))
    return 0


def cmd_infer(args) -> int:
    ckpt, split, model = _load(args)
    sampler = SamplerSpec.parse(args.sampler)
    wanted = set(int(u) for u in args.users.split(",")) if args.users else None
    examples = [ex for ex in split.view("test") if wanted is None or ex.user in wanted]
    if not examples:
        raise DataError("no matching users")
    batch = make_batch(examples, model.n_items, model.max_len, ckpt.config.torch_dtype)
    gen = torch.Generator().manual_seed(ckpt.config.seed)
    x0 = initial_state(model, batch, eval_prior(ckpt.config, ckpt.stage), gen)
    top = rank(infer(model, batch.sequences, x0, sampler), model.item_table.detach(),
               exclusion_mask(batch), args.k)
    for u, items in zip(batch.users, top.tolist()):
        print(json.dumps({"user": u, "items": items}))
    return 0


def cmd_bench(args) -> int:
    ckpt, split, model = _load(args)
    sampler = SamplerSpec.parse(args.sampler)
    res = bench(model, sampler, split.view("test"), eval_prior(ckpt.config, ckpt.stage),
                warmup=args.warmup, samples=args.samples, batch_size=ckpt.config.batch,
                seed=ckpt.config.seed)
    print(json.dumps(res.as_dict(), sort_keys=True))
    return 0


def cmd_dump(args) -> int:
    ckpt, split, model = _load(args)
    examples = split.view("test")[: args.users]
    batch = make_batch(examples, model.n_items, model.max_len, ckpt.config.torch_dtype)
    gen = torch.Generator().manual_seed(ckpt.config.seed)
    x0 = initial_state(model, batch, eval_prior(ckpt.config, ckpt.stage), gen)
    _, traj = euler_infer(model, batch.sequences, x0, args.steps, return_trajectory=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "step", "t"] + [f"dim{j}" for j in range(model.d)])
        for step, x in enumerate(traj):
            for u, row in zip(batch.users, x.tolist()):
                w.writerow([u, step, repr(step / args.steps)] + [repr(v) for v in row])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fave", description="One-step flow-matching sequential recommendation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="ingest an interaction file and write a leave-one-out split")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-len", type=int, default=5)
    s.add_argument("--columns", help="user,item,timestamp field positions, e.g. 0,1,3")
    s.add_argument("--skip-header", action="store_true")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="write a synthetic deterministic-transition log")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=50)
    s.add_argument("--items", type=int, default=30)
    s.add_argument("--min-len", type=int, default=6)
    s.add_argument("--max-len", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="stage-1 checkpoint (stage 2) or stage-2 checkpoint to resume")
    s.add_argument("--resume", help="stage-1 checkpoint to resume")
    s.set_defaults(func=cmd_train)

    def common(s, sampler=True):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--config", help="optional config that must match the checkpoint")
        if sampler:
            s.add_argument("--sampler", default="one_step", help="one_step or euler:N")

    s = sub.add_parser("eval", help="rank the full catalogue and print a report")
    common(s)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--summary", action="store_true", help="omit per-user lists")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="print top-K items for test users")
    common(s)
    s.add_argument("--users", help="comma separated user indices (default all)")
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="FLOPs, latency and inference time")
    common(s)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--samples", type=int, default=100)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump-trajectory", help="write Euler intermediate states as CSV")
    common(s, sampler=False)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=30)
    s.add_argument("--users", type=int, default=10)
    s.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, CheckpointError, DataError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
