"""Two-stage training: Gaussian-prior manifold construction, then
average-velocity consolidation from the semantic anchor prior."""
from __future__ import annotations

import json
import logging
import math
import sys
from typing import Callable

import torch

from . import autodiff as ad
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import Batch, SplitDataset, make_batch
from .flowcore import (
    TIME_SAMPLERS,
    LossBreakdown,
    gaussian_prior,
    interpolate,
    loss_cons,
    loss_match,
    loss_rec,
    loss_src,
    loss_tgt,
    sample_interval,
    semantic_anchor_prior,
    total_loss,
)
from .inference import eval_prior, evaluate
from .model import FaveModel

log = logging.getLogger(__name__)

LOG_FIELDS = ("rec", "tgt", "src", "match", "cons", "total")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def print_log(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# per-batch objectives
# ---------------------------------------------------------------------------


def stage1_losses(model: FaveModel, batch: Batch, config: TrainConfig,
                  gen: torch.Generator) -> LossBreakdown:
    B = len(batch)
    dtype = model.item_emb.dtype
    lam = model.sample_lambda(B, gen)
    x0 = gaussian_prior(B, model.d, gen, dtype)
    t = TIME_SAMPLERS[config.stage1_time](B, gen, dtype)
    r = torch.ones_like(t)
    enc = model.encode(batch.sequences)
    x1 = model.embed_items(batch.targets)
    if config.detach_target:
        # embedding geometry is then shaped by the cross entropy alone
        x1 = x1.detach()
    f_out, E_n = model.flow(enc, interpolate(x0, x1, t), t, r, lam)
    parts = {
        "rec": loss_rec(f_out, x1),
        "tgt": loss_tgt(f_out, batch.targets, model.item_table),
        "src": loss_src(E_n, batch.interactions, model.decoder),
    }
    return total_loss(1, parts, config.alpha, config.beta, config.gamma)


def stage2_losses(model: FaveModel, batch: Batch, config: TrainConfig,
                  gen: torch.Generator, cons_grad: bool | None = None) -> LossBreakdown:
    """Stage-2 objective. ``cons_grad=False`` evaluates the consistency term
    without building its graph (used when its weight is zero)."""
    B = len(batch)
    dtype = model.item_emb.dtype
    lam = model.sample_lambda(B, gen)
    x0 = semantic_anchor_prior(batch.sequences, batch.masks, config.rho,
                               model.item_table.detach(), gen)
    t = TIME_SAMPLERS[config.stage2_time](B, gen, dtype)
    r = sample_interval(t, config.p_end, gen)
    assert bool((r > t).all()), "stage-2 interval must satisfy r > t"
    enc = model.encode(batch.sequences)
    x1 = model.embed_items(batch.targets)
    x_t = interpolate(x0, x1, t)
    f_out, E_n = model.flow(enc, x_t, t, r, lam)

    def flow_fn(x, tt, rr):
        return model.flow(enc, x, tt, rr, lam)[0]

    if cons_grad is None:
        cons_grad = config.gamma > 0
    with torch.set_grad_enabled(cons_grad and torch.is_grad_enabled()):
        cons = loss_cons(flow_fn, x_t, t, r, x0, f_out=f_out, method=config.jvp_method)
    if not cons_grad:
        cons = cons.detach()
    parts = {
        "match": loss_match(f_out, x1),
        "cons": cons,
        "tgt": loss_tgt(f_out, batch.targets, model.item_table),
        "src": loss_src(E_n, batch.interactions, model.decoder),
    }
    return total_loss(2, parts, config.alpha, config.beta, config.gamma)


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def model_from_checkpoint(ckpt: Checkpoint, key: str = "param.") -> FaveModel:
    n_items = int(ckpt.meta["n_items"])
    model = FaveModel.from_config(ckpt.config, n_items)
    state = {k: v.to(ckpt.config.torch_dtype) for k, v in ckpt.params(key).items()}
    model.load_state_dict(state)
    if ckpt.stage >= 2:
        model.freeze_embeddings()
    return model


class _StageRun:
    def __init__(self, stage: int, split: SplitDataset, config: TrainConfig,
                 model: FaveModel, on_epoch: Callable[[dict], None] | None,
                 on_checkpoint: Callable[[Checkpoint], None] | None = None):
        self.stage = stage
        self.on_checkpoint = on_checkpoint
        self.split = split
        self.config = config
        self.model = model
        self.on_epoch = on_epoch or print_log
        self.examples = split.training_examples(config.augment)
        if not self.examples:
            raise ValueError("no training examples; sequences are too short")
        self.by_user: list[list[int]] = []
        for i, ex in enumerate(self.examples):
            if not self.by_user or self.examples[self.by_user[-1][0]].user != ex.user:
                self.by_user.append([])
            self.by_user[-1].append(i)
        self.epochs = config.epochs1 if stage == 1 else config.epochs2
        per_epoch = (len(self.by_user) * config.cuts_per_user if config.cuts_per_user
                     else len(self.examples))
        self.steps_per_epoch = math.ceil(per_epoch / config.batch)
        self.warmup_steps = max(1, round(config.warmup * self.epochs * self.steps_per_epoch))
        self.named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.opt = torch.optim.Adam([p for _, p in self.named], lr=config.lr,
                                    betas=(0.9, 0.999), eps=1e-8,
                                    weight_decay=config.weight_decay, foreach=False)
        self.gen = torch.Generator().manual_seed(config.seed + 7919 * stage)
        self.epoch = 0
        self.step = 0
        self.best_score = -math.inf
        self.best_state: dict[str, torch.Tensor] | None = None
        self.bad_epochs = 0
        self.stopped = False

    # state <-> checkpoint

    def checkpoint(self) -> Checkpoint:
        tensors = {f"param.{k}": v.detach().clone() for k, v in self.model.state_dict().items()}
        if self.best_state is not None:
            tensors.update({f"best.{k}": v.clone() for k, v in self.best_state.items()})
        for name, p in self.named:
            st = self.opt.state.get(p)
            if st:
                tensors[f"adam.m.{name}"] = st["exp_avg"].clone()
                tensors[f"adam.v.{name}"] = st["exp_avg_sq"].clone()
                tensors[f"adam.step.{name}"] = torch.as_tensor(st["step"], dtype=torch.float64).clone()
        tensors["rng.train"] = self.gen.get_state()
        meta = {"epoch": self.epoch, "step": self.step, "best_score": self.best_score,
                "bad_epochs": self.bad_epochs, "stopped": float(self.stopped),
                "n_items": self.model.n_items}
        return Checkpoint(self.config, self.stage, tensors, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        dtype = self.config.torch_dtype
        self.model.load_state_dict({k: v.to(dtype) for k, v in ckpt.params().items()})
        best = ckpt.params("best.")
        self.best_state = {k: v.to(dtype) for k, v in best.items()} or None
        for name, p in self.named:
            if f"adam.m.{name}" in ckpt.tensors:
                self.opt.state[p] = {
                    "step": ckpt.tensors[f"adam.step.{name}"].to(torch.float32).clone(),
                    "exp_avg": ckpt.tensors[f"adam.m.{name}"].to(dtype).clone(),
                    "exp_avg_sq": ckpt.tensors[f"adam.v.{name}"].to(dtype).clone(),
                }
        self.gen.set_state(ckpt.tensors["rng.train"])
        self.epoch = int(ckpt.meta["epoch"])
        self.step = int(ckpt.meta["step"])
        self.best_score = ckpt.meta["best_score"]
        self.bad_epochs = int(ckpt.meta["bad_epochs"])
        self.stopped = bool(ckpt.meta["stopped"])

    # loop

    def _losses(self, batch: Batch) -> LossBreakdown:
        if self.stage == 1:
            return stage1_losses(self.model, batch, self.config, self.gen)
        return stage2_losses(self.model, batch, self.config, self.gen)

    def _epoch_order(self) -> list[int]:
        """Example indices for one epoch: all of them, or ``cuts_per_user``
        random cuts (with replacement) per user, shuffled."""
        k = self.config.cuts_per_user
        if not k:
            return torch.randperm(len(self.examples), generator=self.gen).tolist()
        chosen = []
        for idx in self.by_user:
            picks = torch.randint(len(idx), (k,), generator=self.gen).tolist()
            chosen.extend(idx[j] for j in picks)
        order = torch.randperm(len(chosen), generator=self.gen).tolist()
        return [chosen[j] for j in order]

    def train_epoch(self) -> dict:
        cfg = self.config
        self.model.train()
        dtype = cfg.torch_dtype
        perm = self._epoch_order()
        sums = dict.fromkeys(LOG_FIELDS, 0.0)
        count = 0
        for start in range(0, len(perm), cfg.batch):
            batch = make_batch([self.examples[i] for i in perm[start:start + cfg.batch]],
                               self.model.n_items, self.model.max_len, dtype)
            parts = self._losses(batch)
            total = parts.total
            if not bool(torch.isfinite(total)):
                raise FloatingPointError(f"non-finite loss at stage {self.stage} step {self.step}")
            grads = ad.grad(total, self.named)
            for name, p in self.named:
                p.grad = grads[name]
            if cfg.clip > 0:
                torch.nn.utils.clip_grad_norm_([p for _, p in self.named], cfg.clip,
                                               foreach=False)
            lr = cfg.lr * min(1.0, (self.step + 1) / self.warmup_steps)
            for group in self.opt.param_groups:
                group["lr"] = lr
            self.opt.step()
            self.step += 1
            n = len(batch)
            for k, v in parts.as_dict().items():
                sums[k] += v * n
            count += n
        return {k: v / count for k, v in sums.items()}

    def validate(self) -> float:
        report = evaluate(self.model, self.split.view("valid"),
                          eval_prior(self.config, self.stage),
                          seed=self.config.seed + 104729, batch_size=self.config.batch)
        return report.metrics["N@20"]

    def run(self) -> Checkpoint:
        cfg = self.config
        last_good = self.checkpoint()
        while self.epoch < self.epochs and not self.stopped:
            try:
                losses = self.train_epoch()
            except (FloatingPointError, ad.NonFiniteError) as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            self.epoch += 1
            val = self.validate()
            if val > self.best_score:
                self.best_score = val
                self.bad_epochs = 0
                self.best_state = {k: v.detach().clone()
                                   for k, v in self.model.state_dict().items()}
            else:
                self.bad_epochs += 1
            if cfg.patience > 0 and self.bad_epochs >= cfg.patience:
                self.stopped = True
            record = {"epoch": self.epoch, "stage": self.stage, **losses, "val_n20": val}
            self.on_epoch(record)
            last_good = self.checkpoint()
            if self.on_checkpoint is not None:
                self.on_checkpoint(last_good)
        if self.best_state is not None and cfg.patience > 0:
            self.model.load_state_dict(self.best_state)
        return self.checkpoint()


def train_stage1(split: SplitDataset, config: TrainConfig, *,
                 resume: Checkpoint | None = None,
                 on_epoch: Callable[[dict], None] | None = None,
                 on_checkpoint: Callable[[Checkpoint], None] | None = None) -> Checkpoint:
    """Gaussian prior, r = 1, trainable embeddings; returns the final checkpoint.

    With early stopping enabled the returned parameters are the best ones on
    validation N@20. ``on_checkpoint`` receives the resumable state after
    every epoch.
    """
    torch.set_num_threads(config.threads)
    model = FaveModel.from_config(config, split.n_items)
    run = _StageRun(1, split, config, model, on_epoch, on_checkpoint)
    if resume is not None:
        if resume.stage != 1:
            raise ValueError(f"cannot resume stage 1 from a stage-{resume.stage} checkpoint")
        run.restore(resume)
    return run.run()


def train_stage2(split: SplitDataset, config: TrainConfig, init: Checkpoint, *,
                 on_epoch: Callable[[dict], None] | None = None,
                 on_checkpoint: Callable[[Checkpoint], None] | None = None) -> Checkpoint:
    """Frozen embeddings, semantic anchor prior, interval sampling.

    ``init`` is a stage-1 checkpoint (start stage 2) or a stage-2 one (resume).
    """
    torch.set_num_threads(config.threads)
    if init.stage not in (1, 2):
        raise ValueError(f"stage 2 needs a stage-1 or stage-2 checkpoint, got stage {init.stage}")
    if init.config.digest() != config.digest():
        raise ValueError("config mismatch between checkpoint and stage-2 config")
    model = model_from_checkpoint(init)
    model.freeze_embeddings()
    run = _StageRun(2, split, config, model, on_epoch, on_checkpoint)
    if init.stage == 2:
        run.restore(init)
    return run.run()


@torch.no_grad()
def measure_cons(model: FaveModel, split_or_examples, config: TrainConfig, *,
                 seed: int = 0, batch_size: int = 512) -> float:
    """Mean consistency loss over fixed examples with a fixed sampling seed."""
    examples = (split_or_examples.view("test") if isinstance(split_or_examples, SplitDataset)
                else list(split_or_examples))
    was = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    total, n = 0.0, 0
    try:
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start:start + batch_size], model.n_items,
                               model.max_len, config.torch_dtype)
            parts = stage2_losses(model, batch, config, gen, cons_grad=False)
            total += float(parts.cons) * len(batch)
            n += len(batch)
    finally:
        model.train(was)
    return total / n
