"""One-step and Euler inference, full-catalogue ranking and evaluation reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from . import metrics
from .config import TrainConfig
from .data import Batch, Example, make_batch
from .flowcore import PriorSpec
from .model import FaveModel


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "one_step"
    steps: int = 1

    def __post_init__(self):
        if self.kind not in ("one_step", "euler"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if self.steps < 1:
            raise ValueError("Euler sampler needs at least one step")
        if self.kind == "one_step" and self.steps != 1:
            raise ValueError("one_step sampler takes exactly one step")

    @property
    def forwards(self) -> int:
        return self.steps

    @classmethod
    def parse(cls, text: str) -> "SamplerSpec":
        if text == "one_step":
            return cls()
        if text.startswith("euler:"):
            return cls("euler", int(text.split(":", 1)[1]))
        if text == "euler":
            return cls("euler", 30)
        raise ValueError(f"cannot parse sampler {text!r}; use one_step or euler:N")

    def __str__(self) -> str:
        return "one_step" if self.kind == "one_step" else f"euler:{self.steps}"


def _eval_lambda(model: FaveModel, batch: int) -> Tensor:
    return torch.full((batch, model.d), float(model.delta), dtype=model.item_emb.dtype)


@torch.no_grad()
def one_step_infer(model: FaveModel, sequences: Tensor, x0: Tensor) -> Tensor:
    """Predicted target embedding ``f(x0, 0, 1)`` in a single forward pass."""
    f_out, _ = model(sequences, x0, 0.0, 1.0, lam=_eval_lambda(model, x0.shape[0]))
    return f_out


@torch.no_grad()
def euler_infer(model: FaveModel, sequences: Tensor, x0: Tensor, steps: int,
                return_trajectory: bool = False):
    """Integrate ``dx/dt = f(x, t, 1) - x0`` from t=0 to 1 in ``steps`` Euler steps.

    Under the target reparameterisation the Euler iterate is
    ``x_k = (1 - t_k) x0 + t_k * m_k`` with ``m_k`` the running mean of the
    predictions so far; the loop keeps that form so a single step returns
    ``f(x0, 0, 1)`` bit for bit and a constant field is integrated exactly.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    lam = _eval_lambda(model, x0.shape[0])
    x, m = x0, None
    traj = [x0]
    for k in range(steps):
        f_out, _ = model(sequences, x, k / steps, 1.0, lam=lam)
        m = f_out if m is None else m + (f_out - m) / (k + 1)
        t_next = (k + 1) / steps
        x = m if k + 1 == steps else (1 - t_next) * x0 + t_next * m
        traj.append(x)
    return (x, traj) if return_trajectory else x


def infer(model: FaveModel, sequences: Tensor, x0: Tensor, sampler: SamplerSpec) -> Tensor:
    if sampler.kind == "one_step":
        return one_step_infer(model, sequences, x0)
    return euler_infer(model, sequences, x0, sampler.steps)


def initial_state(model: FaveModel, batch: Batch, prior: PriorSpec,
                  generator: torch.Generator | None = None) -> Tensor:
    return prior.sample(batch.sequences, batch.masks, model.item_table.detach(), generator)


def exclusion_mask(batch: Batch) -> Tensor:
    return batch.interactions > 0


def score(x_hat: Tensor, embeddings: Tensor) -> Tensor:
    return x_hat @ embeddings.T


def rank(x_hat: Tensor, embeddings: Tensor, exclude: Tensor | None, k: int) -> np.ndarray:
    """Top-``k`` items by inner product, excluded items removed.

    Ties go to the smaller item index. ``exclude`` is a ``[B, n_items]`` bool
    mask. Raises ``ValueError`` when a row has fewer than ``k`` candidates.
    """
    s = score(x_hat, embeddings).detach().to(torch.float64).numpy()
    if exclude is not None:
        ex = exclude.numpy()
        if np.any((~ex).sum(axis=1) < k):
            raise ValueError(f"fewer than {k} candidate items to rank")
        s = np.where(ex, -np.inf, s)
    elif s.shape[1] < k:
        raise ValueError(f"fewer than {k} candidate items to rank")
    order = np.argsort(-s, axis=1, kind="stable")
    return order[:, :k]


def target_ranks(x_hat: Tensor, embeddings: Tensor, targets: Tensor,
                 exclude: Tensor | None) -> np.ndarray:
    """1-based rank of each target among the non-excluded items (same tie rule)."""
    s = score(x_hat, embeddings).detach().to(torch.float64).numpy()
    tgt = targets.numpy()
    n = s.shape[1]
    cand = np.ones_like(s, dtype=bool) if exclude is None else ~exclude.numpy()
    ts = s[np.arange(len(tgt)), tgt][:, None]
    idx = np.arange(n)[None, :]
    ahead = cand & ((s > ts) | ((s == ts) & (idx < tgt[:, None])))
    ranks = 1.0 + ahead.sum(axis=1)
    blocked = ~cand[np.arange(len(tgt)), tgt]
    ranks[blocked] = np.inf
    return ranks


@dataclass
class RankingReport:
    sampler: str
    users: list[int]
    ranks: list[float]
    top_k: list[list[int]]
    metrics: dict[str, float]
    gflops_per_sample: float
    timing: dict[str, float] | None = None

    def to_json(self, per_user: bool = True) -> str:
        d = asdict(self)
        d["ranks"] = [r if np.isfinite(r) else None for r in self.ranks]
        if not per_user:
            d.pop("users"), d.pop("ranks"), d.pop("top_k")
        if d["timing"] is None:
            d.pop("timing")
        return json.dumps(d, sort_keys=True)


def eval_prior(config: TrainConfig, stage: int) -> PriorSpec:
    if stage == 1:
        return PriorSpec("gaussian")
    rho = config.rho if config.eval_rho is None else config.eval_rho
    return PriorSpec("semantic_anchor", rho)


@torch.no_grad()
def evaluate(model: FaveModel, examples: Sequence[Example], prior: PriorSpec,
             sampler: SamplerSpec = SamplerSpec(), *, seed: int = 0, batch_size: int = 512,
             ks: Sequence[int] = (10, 20), ild_k: int = 20) -> RankingReport:
    """Rank the full catalogue for every example and aggregate H@K, N@K and ILD.

    Top lists hold ``max(max(ks), ild_k)`` items, fewer only when a user has
    fewer unseen items than that.
    """
    from .bench import sampler_flops

    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    emb = model.item_table.detach()
    dtype = emb.dtype
    ranks, tops, users = [], [], []
    kmax = max(max(ks), ild_k)
    try:
        for start in range(0, len(examples), batch_size):
            batch = make_batch(examples[start:start + batch_size], model.n_items,
                               model.max_len, dtype)
            x0 = initial_state(model, batch, prior, gen)
            x_hat = infer(model, batch.sequences, x0, sampler)
            ex = exclusion_mask(batch)
            ranks.extend(target_ranks(x_hat, emb, batch.targets, ex).tolist())
            # small catalogues may leave fewer than kmax unseen items
            k = min(kmax, int((~ex).sum(dim=1).min()))
            tops.extend(rank(x_hat, emb, ex, k).tolist())
            users.extend(batch.users)
    finally:
        model.train(was_training)
    out = {}
    for k in ks:
        out[f"H@{k}"] = metrics.hit_rate(ranks, k)
        out[f"N@{k}"] = metrics.ndcg(ranks, k)
    out[f"ILD@{ild_k}"] = metrics.ild([t[:ild_k] for t in tops], emb.numpy())
    return RankingReport(str(sampler), users, ranks, tops, out,
                         sampler_flops(model, sampler) / 1e9)
