"""Ranking metrics. Ranks are 1-based; a target that cannot be ranked has rank ``inf``."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def hit_rate(ranks: Sequence[float], k: int) -> float:
    """Percentage of users whose target is within the top ``k``."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return 0.0
    return 100.0 * int(np.sum(ranks <= k)) / ranks.size


def ndcg(ranks: Sequence[float], k: int) -> float:
    """Percentage NDCG@k with a single relevant item (ideal DCG = 1)."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return 0.0
    gains = [1.0 / math.log2(r + 1) if r <= k else 0.0 for r in ranks]
    return 100.0 * float(np.mean(gains))


def ild(lists: Sequence[Sequence[int]], embeddings: np.ndarray) -> float:
    """Mean over lists of the mean pairwise cosine distance within each list."""
    emb = np.asarray(embeddings, dtype=np.float64)
    per_list = []
    for items in lists:
        if len(items) < 2:
            raise ValueError("ILD needs lists of at least two items")
        vecs = emb[np.asarray(items)]
        norms = np.linalg.norm(vecs, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero-norm embedding in recommendation list")
        unit = vecs / norms[:, None]
        sim = unit @ unit.T
        iu = np.triu_indices(len(items), k=1)
        per_list.append(float(np.mean(1.0 - sim[iu])))
    return float(np.mean(per_list)) if per_list else 0.0
