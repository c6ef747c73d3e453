from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch


@dataclass
class TrainConfig:
    # architecture
    d: int = 128
    heads: int = 4
    blocks: int = 2
    max_len: int = 50
    decoder_hidden: int = 128
    delta: float = 1.0
    time_freqs: int = 64
    time_freq_max: float = 100.0
    emb_norm: float = 4.0
    detach_target: bool = True
    # objective
    alpha: float = 0.5
    beta: float = 0.2
    gamma: float = 0.1
    rho: float = 0.75
    p_end: float = 0.5
    stage1_time: str = "logit_normal"
    stage2_time: str = "uniform"
    jvp_method: str = "exact"
    # optimisation
    batch: int = 512
    lr: float = 1e-3
    warmup: float = 0.05
    clip: float = 5.0
    weight_decay: float = 0.0
    epochs1: int = 40
    epochs2: int = 20
    patience: int = 20
    augment: bool = True
    cuts_per_user: int = 16
    min_len: int = 5
    # evaluation
    eval_rho: float | None = None
    euler_steps: int = 30
    # runtime
    seed: int = 2024
    dtype: str = "float64"
    threads: int = 1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "emb_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("rho", "p_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eval_rho is not None and not 0.0 <= self.eval_rho <= 1.0:
            raise ValueError("eval_rho must lie in [0, 1]")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.cuts_per_user < 0:
            raise ValueError("cuts_per_user must be non-negative")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(Path(path), encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
