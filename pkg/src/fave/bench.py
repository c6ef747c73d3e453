"""Analytic FLOPs and wall-clock benchmarks for the inference samplers."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import torch

from .data import Example, make_batch
from .flowcore import PriorSpec
from .inference import SamplerSpec, exclusion_mask, infer, initial_state, rank
from .model import FaveModel


def forward_flops(model: FaveModel) -> int:
    """FLOPs (2 x multiply-adds of every matmul) of one backbone forward for one sample."""
    d, L = model.d, model.max_len
    blocks = len(model.blocks)
    n_freqs = model.time_emb.freqs.numel()
    ff = model.blocks[0].ffn.fc1.weight.shape[0] if blocks else d
    enc = blocks * (4 * L * d * d + 2 * L * L * d + 2 * L * d * ff)
    fus_ff = model.fusion.ffn.fc1.weight.shape[0]
    fusion = 2 * d * d + 2 * L * d * d + 2 * L * d + 2 * d * fus_ff
    time_emb = 2 * (2 * n_freqs * d + d * d)
    head = d * d
    return 2 * (enc + fusion + time_emb + head)


def sampler_flops(model: FaveModel, sampler: SamplerSpec) -> int:
    return sampler.forwards * forward_flops(model)


@dataclass
class BenchResult:
    sampler: str
    gflops_per_sample: float
    latency_ms: float
    infer_time_s: float

    def as_dict(self) -> dict:
        return {"sampler": self.sampler, "gflops_per_sample": self.gflops_per_sample,
                "latency_ms": self.latency_ms, "infer_time_s": self.infer_time_s}


@torch.no_grad()
def measure_latency(model: FaveModel, sampler: SamplerSpec, examples: Sequence[Example],
                    prior: PriorSpec, *, warmup: int = 10, samples: int = 100,
                    seed: int = 0) -> float:
    """Median single-sample inference wall time in milliseconds."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    dtype = model.item_emb.dtype
    batches = [make_batch([examples[i % len(examples)]], model.n_items, model.max_len, dtype)
               for i in range(warmup + samples)]
    x0s = [initial_state(model, b, prior, gen) for b in batches]
    times = []
    for i, (b, x0) in enumerate(zip(batches, x0s)):
        t0 = time.perf_counter()
        infer(model, b.sequences, x0, sampler)
        elapsed = time.perf_counter() - t0
        if i >= warmup:
            times.append(elapsed)
    return 1e3 * statistics.median(times)


@torch.no_grad()
def measure_total_time(model: FaveModel, sampler: SamplerSpec, examples: Sequence[Example],
                       prior: PriorSpec, *, batch_size: int = 512, seed: int = 0) -> float:
    """Seconds for a full batched pass: prior, inference and top-20 ranking."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    dtype = model.item_emb.dtype
    emb = model.item_table.detach()
    t0 = time.perf_counter()
    for start in range(0, len(examples), batch_size):
        b = make_batch(examples[start:start + batch_size], model.n_items, model.max_len, dtype)
        x_hat = infer(model, b.sequences, initial_state(model, b, prior, gen), sampler)
        ex = exclusion_mask(b)
        rank(x_hat, emb, ex, min(20, int((~ex).sum(dim=1).min())))
    return time.perf_counter() - t0


def bench(model: FaveModel, sampler: SamplerSpec, examples: Sequence[Example], prior: PriorSpec,
          *, warmup: int = 10, samples: int = 100, batch_size: int = 512,
          seed: int = 0) -> BenchResult:
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        lat = measure_latency(model, sampler, examples, prior, warmup=warmup,
                              samples=samples, seed=seed)
        total = measure_total_time(model, sampler, examples, prior,
                                   batch_size=batch_size, seed=seed)
    finally:
        torch.set_num_threads(threads)
    return BenchResult(str(sampler), sampler_flops(model, sampler) / 1e9, lat, total)
