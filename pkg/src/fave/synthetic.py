"""Synthetic interaction logs with a deterministic next-item rule.

Items sit on one random cycle; every user walks that cycle from a random
start, so the next item is a function of the current one.
"""
from __future__ import annotations

import numpy as np

from .data import InteractionLog, SplitDataset, build_splits


def transition_cycle(n_items: int, rule_seed: int = 0) -> np.ndarray:
    """``nxt[i]`` is the item that follows ``i``."""
    order = np.random.default_rng(rule_seed).permutation(n_items)
    nxt = np.empty(n_items, dtype=np.int64)
    nxt[order] = np.roll(order, -1)
    return nxt


def transition_log(n_users: int, n_items: int, min_len: int = 6, max_len: int = 12,
                   seed: int = 0, rule_seed: int = 0) -> InteractionLog:
    if max_len > n_items:
        raise ValueError("max_len must not exceed n_items (sequences would repeat)")
    nxt = transition_cycle(n_items, rule_seed)
    rng = np.random.default_rng(seed)
    users, items, stamps = [], [], []
    for u in range(n_users):
        cur = int(rng.integers(n_items))
        length = int(rng.integers(min_len, max_len + 1))
        for j in range(length):
            users.append(u)
            items.append(cur)
            stamps.append(1000 * u + j)
            cur = int(nxt[cur])
    return InteractionLog(np.asarray(users), np.asarray(items), np.asarray(stamps),
                          np.arange(n_users), np.arange(n_items))


def transition_split(n_users: int, n_items: int, min_len: int = 6, max_len: int = 12,
                     seed: int = 0, rule_seed: int = 0) -> SplitDataset:
    log = transition_log(n_users, n_items, min_len, max_len, seed, rule_seed)
    return build_splits(log, min_len=min(min_len, 5))


def write_tsv(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, ts in zip(log.users, log.items, log.timestamps):
            fh.write(f"{log.user_ids[u]}\t{log.item_ids[i]}\t{ts}\n")
