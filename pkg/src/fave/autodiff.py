"""Differentiation kernel on top of torch.

Reverse-mode gradients come from torch autograd. Forward-mode directional
derivatives (JVPs) come from ``torch.func.jvp``; its output stays on the
autograd graph, so a loss built from a JVP can itself be differentiated with
respect to parameters (reverse-over-forward).

The composite primitives below (layer norm, softmax, GELU, attention) are
written in elementary torch ops on purpose. Some fused torch kernels return
wrong parameter gradients when differentiated through a JVP (``layer_norm`` on
CPU is one), while the elementary ops compose correctly. Every primitive is
checked against central finite differences in the test suite.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import torch
from torch import Tensor


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""


class ShapeError(ValueError):
    pass


def check_finite(x: Tensor, what: str) -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------


def grad(
    loss: Tensor,
    params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    *,
    retain_graph: bool = False,
    create_graph: bool = False,
) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` for each named parameter.

    Parameters that did not take part in computing ``loss`` get a zero tensor.
    Raises ``ShapeError`` for a non-scalar loss and ``NonFiniteError`` naming
    the first parameter whose gradient is not finite.
    """
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    if loss.dim() != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    tensors = [p for _, p in named]
    grads = torch.autograd.grad(
        loss,
        tensors,
        retain_graph=retain_graph,
        create_graph=create_graph,
        allow_unused=True,
    )
    out = {}
    for (name, p), g in zip(named, grads):
        if g is None:
            g = torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------


def _check_tangents(inputs: Sequence[Tensor], tangents: Sequence[Tensor]) -> None:
    if len(inputs) != len(tangents):
        raise ShapeError(f"{len(inputs)} inputs but {len(tangents)} tangents")
    for i, (x, v) in enumerate(zip(inputs, tangents)):
        if x.shape != v.shape:
            raise ShapeError(
                f"tangent {i} has shape {tuple(v.shape)}, input has {tuple(x.shape)}"
            )


def jvp(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tangents: Sequence[Tensor],
    *,
    method: str = "exact",
    eps: float = 1e-4,
    detach_tangents: bool = True,
) -> tuple[Tensor, Tensor]:
    """Return ``(f(*inputs), J_f(inputs) @ tangents)``.

    ``method="exact"`` propagates tangents through the primitives in a single
    forward pass; the directional derivative is differentiable w.r.t. any
    parameters ``f`` closes over. ``method="fd"`` is the central-difference
    cross-check with step ``eps``.
    """
    inputs = tuple(inputs)
    tangents = tuple(tangents)
    _check_tangents(inputs, tangents)
    if detach_tangents:
        tangents = tuple(v.detach() for v in tangents)
    if method == "exact":
        out, tangent_out = torch.func.jvp(f, inputs, tangents)
    elif method == "fd":
        out = f(*inputs)
        tangent_out = fd_jvp(f, inputs, tangents, eps=eps)
    else:
        raise ValueError(f"unknown jvp method {method!r}")
    return out, tangent_out


def fd_jvp(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tangents: Sequence[Tensor],
    eps: float = 1e-4,
) -> Tensor:
    """Central finite-difference directional derivative."""
    _check_tangents(inputs, tangents)
    plus = f(*(x + eps * v for x, v in zip(inputs, tangents)))
    minus = f(*(x - eps * v for x, v in zip(inputs, tangents)))
    return (plus - minus) / (2 * eps)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul of {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} of {tuple(a.shape)} and {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return a * b


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def gelu(x: Tensor) -> Tensor:
    # erf form, not torch.nn.functional.gelu
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, True = keep) drops entries.

    Rows with every entry masked come out uniform rather than NaN.
    """
    if mask is not None:
        x = x.masked_fill(~mask, -1e9)
    # the shift cancels in the ratio, so it carries no gradient
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    centered = x - mu
    var = (centered * centered).mean(dim=-1, keepdim=True)
    y = centered / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if ids.dtype not in (torch.int64, torch.int32):
        raise TypeError("embedding ids must be integers")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def concat(tensors: Sequence[Tensor], dim: int = -1) -> Tensor:
    return torch.cat(tuple(tensors), dim=dim)


def mean(x: Tensor, dim: int | None = None, keepdim: bool = False) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def sum(x: Tensor, dim: int | None = None, keepdim: bool = False) -> Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention with a boolean keep-mask.

    q: ``[..., Lq, h]``, k and v: ``[..., Lk, h]``, mask broadcastable to
    ``[..., Lq, Lk]``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}"
        )
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    weights = softmax(scores, mask)
    return weights @ v
