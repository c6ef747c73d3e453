"""Flow-matching mathematics: trajectories, samplers and training losses."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import torch
from torch import Tensor

from . import autodiff as ad


def interpolate(x0: Tensor, x1: Tensor, t: Tensor | float) -> Tensor:
    """Point ``(1 - t) x0 + t x1`` on the straight path; ``t`` is scalar or per-row."""
    if isinstance(t, Tensor):
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise ValueError("t must lie in [0, 1]")
        if t.dim() == 1:
            t = t[:, None]
    elif not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return (1 - t) * x0 + t * x1


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def sample_time(n: int, generator: torch.Generator | None = None,
                dtype: torch.dtype = torch.float64) -> Tensor:
    """Logit-normal(0, 1) times, strictly inside (0, 1)."""
    z = torch.randn(n, generator=generator, dtype=torch.float64)
    t = torch.sigmoid(z)
    eps = torch.finfo(dtype).eps
    return t.clamp(eps, 1 - eps).to(dtype)


def logit_normal_cdf(t: Tensor) -> Tensor:
    """CDF of the logit-normal(0, 1) law sampled by :func:`sample_time`."""
    z = torch.log(t) - torch.log1p(-t)
    return 0.5 * (1 + torch.erf(z / 2 ** 0.5))


def sample_uniform_time(n: int, generator: torch.Generator | None = None,
                        dtype: torch.dtype = torch.float64) -> Tensor:
    return torch.rand(n, generator=generator, dtype=torch.float64).to(dtype)


TIME_SAMPLERS: dict[str, Callable[..., Tensor]] = {
    "logit_normal": sample_time,
    "uniform": sample_uniform_time,
}


def sample_interval(t: Tensor, p_end: float, generator: torch.Generator | None = None) -> Tensor:
    """End times ``r``: 1 with probability ``p_end``, else Uniform(t, 1).

    Always ``t < r <= 1``; a uniform draw that lands on ``t`` is redrawn.
    """
    if bool((t >= 1).any()) or bool((t < 0).any()):
        raise ValueError("t must lie in [0, 1)")
    if not 0.0 <= p_end <= 1.0:
        raise ValueError("p_end must lie in [0, 1]")
    n = t.shape[0]
    anchor = torch.rand(n, generator=generator, dtype=torch.float64) < p_end
    u = torch.rand(n, generator=generator, dtype=torch.float64).to(t.dtype)
    r = t + (1 - t) * u
    while True:
        bad = ~anchor & (r <= t)
        if not bool(bad.any()):
            break
        u = torch.rand(int(bad.sum()), generator=generator, dtype=torch.float64).to(t.dtype)
        r[bad] = t[bad] + (1 - t[bad]) * u
    return torch.where(anchor, torch.ones_like(t), r)


def gaussian_prior(n: int, d: int, generator: torch.Generator | None = None,
                   dtype: torch.dtype = torch.float64) -> Tensor:
    return torch.randn(n, d, generator=generator, dtype=dtype)


def semantic_anchor_prior(sequences: Tensor, masks: Tensor, rho: float, embeddings: Tensor,
                          generator: torch.Generator | None = None) -> Tensor:
    """Masked embedding of one history item per row: ``m * e_k``.

    ``k`` is uniform over the non-padding positions of each (truncated)
    sequence and ``m`` is a fresh Bernoulli(rho) vector.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    lengths = masks.sum(dim=1)
    if bool((lengths == 0).any()):
        raise ValueError("semantic anchor prior needs a non-empty history")
    B, L = sequences.shape
    u = torch.rand(B, generator=generator, dtype=torch.float64)
    offset = torch.minimum((u * lengths).long(), lengths - 1)
    pos = L - lengths + offset
    k = sequences[torch.arange(B), pos]
    e_k = embeddings[k]
    keep = torch.rand(e_k.shape, generator=generator, dtype=torch.float64) < rho
    return e_k * keep.to(e_k.dtype)


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "gaussian"
    rho: float = 0.75

    def __post_init__(self):
        if self.kind not in ("gaussian", "semantic_anchor"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def sample(self, sequences: Tensor, masks: Tensor, embeddings: Tensor,
               generator: torch.Generator | None = None) -> Tensor:
        if self.kind == "gaussian":
            return gaussian_prior(sequences.shape[0], embeddings.shape[1], generator,
                                  embeddings.dtype)
        return semantic_anchor_prior(sequences, masks, self.rho, embeddings, generator)


# ---------------------------------------------------------------------------
# losses (all batch means)
# ---------------------------------------------------------------------------


def _sq_dist(a: Tensor, b: Tensor, what: str) -> Tensor:
    if a.shape != b.shape:
        raise ad.ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)}")
    diff = a - b
    return (diff * diff).sum(dim=-1).mean()


def loss_rec(f_out: Tensor, x1: Tensor) -> Tensor:
    return _sq_dist(f_out, x1, "loss_rec")


def loss_match(f_out: Tensor, x1: Tensor) -> Tensor:
    return _sq_dist(f_out, x1, "loss_match")


def loss_tgt(f_out: Tensor, targets: Tensor, embeddings: Tensor) -> Tensor:
    """Full-catalogue cross entropy of the target under ``f_out . e_j`` logits.

    ``embeddings`` holds the real item rows only.
    """
    n = embeddings.shape[0]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= n):
        raise IndexError(f"target item out of range [0, {n})")
    logits = f_out @ embeddings.T
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    log_z = torch.log(torch.exp(shifted).sum(dim=-1))
    picked = shifted.gather(1, targets[:, None])[:, 0]
    return (log_z - picked).mean()


def loss_src(E_n: Tensor, a_u: Tensor, decoder: Callable[[Tensor], Tensor]) -> Tensor:
    return _sq_dist(decoder(E_n), a_u, "loss_src")


def loss_cons(flow_fn: Callable[[Tensor, Tensor, Tensor], Tensor], x_t: Tensor, t: Tensor,
              r: Tensor, x0: Tensor, f_out: Tensor | None = None, *,
              method: str = "exact", eps: float = 1e-4) -> Tensor:
    """Squared directional derivative of ``f`` along the tangent ``(v, 1, 0)``.

    ``v = f(x_t, t, r) - x0`` is the current average-velocity estimate and is
    detached. ``flow_fn(x_t, t, r)`` must return the target prediction.
    """
    if bool((r < t).any()):
        raise ValueError("interval end r must not precede t")
    if f_out is None:
        f_out = flow_fn(x_t, t, r)
    v = (f_out - x0).detach()
    if v.shape != x_t.shape:
        raise ad.ShapeError(f"loss_cons: velocity {tuple(v.shape)} vs state {tuple(x_t.shape)}")
    _, df = ad.jvp(flow_fn, (x_t, t, r), (v, torch.ones_like(t), torch.zeros_like(r)),
                   method=method, eps=eps)
    return (df * df).sum(dim=-1).mean()


@dataclass
class LossBreakdown:
    rec: Tensor | float = 0.0
    tgt: Tensor | float = 0.0
    src: Tensor | float = 0.0
    match: Tensor | float = 0.0
    cons: Tensor | float = 0.0
    total: Tensor | float = 0.0
    alpha: float = 0.5
    beta: float = 0.2
    gamma: float = 0.1

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)
                if f.name not in ("alpha", "beta", "gamma")}


_STAGE_PARTS = {1: ("rec", "tgt", "src"), 2: ("match", "cons", "tgt", "src")}


def total_loss(stage: int, components: dict, alpha: float = 0.5, beta: float = 0.2,
               gamma: float = 0.1) -> LossBreakdown:
    """Stage 1: rec + a*tgt + b*src.  Stage 2: match + g*cons + a*tgt + b*src."""
    if stage not in _STAGE_PARTS:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    missing = [k for k in _STAGE_PARTS[stage] if components.get(k) is None]
    if missing:
        raise KeyError(f"stage {stage} loss is missing components {missing}")
    c = components
    if stage == 1:
        total = c["rec"] + alpha * c["tgt"] + beta * c["src"]
    else:
        total = c["match"] + gamma * c["cons"] + alpha * c["tgt"] + beta * c["src"]
    parts = {k: c[k] for k in _STAGE_PARTS[stage]}
    return LossBreakdown(**parts, total=total, alpha=alpha, beta=beta, gamma=gamma)
