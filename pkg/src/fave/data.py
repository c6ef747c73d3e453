"""Interaction logs, leave-one-out splits and padded batches."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Dense-indexed interaction records in file order.

    ``user_ids[u]`` / ``item_ids[i]`` give the raw id behind dense index
    ``u`` / ``i``.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def sequences(self) -> dict[int, list[int]]:
        """Per-user item lists in chronological order, ties kept in file order."""
        order = np.lexsort((np.arange(len(self.users)), self.timestamps, self.users))
        seqs: dict[int, list[int]] = {}
        for u, i in zip(self.users[order].tolist(), self.items[order].tolist()):
            seqs.setdefault(u, []).append(i)
        return seqs

    @classmethod
    def from_records(cls, records: Sequence[tuple[int, int, int]]) -> "InteractionLog":
        if not records:
            raise DataError("no interaction records")
        arr = np.asarray(records, dtype=np.int64)
        user_ids, users = np.unique(arr[:, 0], return_inverse=True)
        item_ids, items = np.unique(arr[:, 1], return_inverse=True)
        return cls(users.astype(np.int64), items.astype(np.int64), arr[:, 2].copy(),
                   user_ids, item_ids)


def ingest_tsv(path: str | os.PathLike, columns: Sequence[int] | None = None,
               skip_header: bool = False) -> InteractionLog:
    """Read a whitespace/tab separated interaction file.

    ``columns`` gives the (user, item, timestamp) field positions. By default
    a 3-field file is read as ``user item timestamp`` and a wider one as the
    MovieLens ``user item rating timestamp`` layout.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records = []
    cols = tuple(columns) if columns is not None else None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if skip_header and lineno == 1:
                continue
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 fields, got {len(fields)}")
            if cols is None:
                cols = (0, 1, 2) if len(fields) == 3 else (0, 1, 3)
            try:
                records.append(tuple(int(fields[c]) for c in cols))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    if not records:
        raise DataError(f"{path}: empty interaction file")
    return InteractionLog.from_records(records)


@dataclass(frozen=True)
class Example:
    user: int
    history: tuple[int, ...]
    target: int


@dataclass
class SplitDataset:
    """Leave-one-out split: last item tests, second-to-last validates.

    ``sequences`` maps dense user index to the full chronological sequence.
    """

    sequences: dict[int, list[int]]
    n_items: int
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    min_len: int = 5

    @property
    def pad_id(self) -> int:
        return self.n_items

    @property
    def users(self) -> list[int]:
        return sorted(self.sequences)

    def train_prefix(self, user: int) -> list[int]:
        return self.sequences[user][:-2]

    def view(self, name: str) -> list[Example]:
        if name == "train":
            return self.training_examples(augment=False)
        if name == "valid":
            return [Example(u, tuple(s[:-2]), s[-2]) for u, s in self._items()]
        if name == "test":
            return [Example(u, tuple(s[:-1]), s[-1]) for u, s in self._items()]
        raise KeyError(name)

    def training_examples(self, augment: bool = True) -> list[Example]:
        """Next-item examples drawn from each training prefix.

        With ``augment`` every position of the prefix (after the first) is a
        target; otherwise only the last one.
        """
        out = []
        for u, s in self._items():
            prefix = s[:-2]
            first = 1 if augment else len(prefix) - 1
            for j in range(max(first, 1), len(prefix)):
                out.append(Example(u, tuple(prefix[:j]), prefix[j]))
        return out

    def _items(self):
        return ((u, self.sequences[u]) for u in self.users)

    # manifest ---------------------------------------------------------------

    def write(self, out_dir: str | os.PathLike) -> None:
        """Write ``split.tsv`` (one user per line) and ``meta.json``.

        Each manifest line is ``user<TAB>items<TAB>markers`` where markers has
        one character per item: ``t`` train, ``v`` valid, ``e`` test.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for u, s in self._items():
            markers = "t" * (len(s) - 2) + "ve"
            lines.append(f"{u}\t{' '.join(map(str, s))}\t{markers}\n")
        with open(out_dir / "split.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
        meta = {
            "n_items": self.n_items,
            "n_users": len(self.sequences),
            "min_len": self.min_len,
            "user_ids": None if self.user_ids is None else [int(x) for x in self.user_ids],
            "item_ids": None if self.item_ids is None else [int(x) for x in self.item_ids],
        }
        with open(out_dir / "meta.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, data_dir: str | os.PathLike) -> "SplitDataset":
        data_dir = Path(data_dir)
        with open(data_dir / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        seqs = {}
        with open(data_dir / "split.tsv", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"split.tsv:{lineno}: malformed manifest line")
                items = [int(x) for x in parts[1].split()]
                if len(parts[2]) != len(items):
                    raise DataError(f"split.tsv:{lineno}: marker/item count mismatch")
                seqs[int(parts[0])] = items
        ids = meta.get("user_ids")
        iids = meta.get("item_ids")
        return cls(seqs, meta["n_items"],
                   None if ids is None else np.asarray(ids),
                   None if iids is None else np.asarray(iids),
                   meta.get("min_len", 5))


def build_splits(log: InteractionLog, min_len: int = 5) -> SplitDataset:
    if min_len < 3:
        raise ValueError("min_len must be at least 3")
    seqs = {u: s for u, s in log.sequences().items() if len(s) >= min_len}
    if not seqs:
        raise DataError(f"no user has at least {min_len} interactions")
    return SplitDataset(seqs, log.n_items, log.user_ids, log.item_ids, min_len)


@dataclass
class Batch:
    sequences: torch.Tensor      # [B, L] int64, left padded with pad_id
    masks: torch.Tensor          # [B, L] bool
    targets: torch.Tensor        # [B] int64
    interactions: torch.Tensor   # [B, n_items] float
    users: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.targets.shape[0]


def make_batch(examples: Sequence[Example], n_items: int, max_len: int = 50,
               dtype: torch.dtype = torch.float64) -> Batch:
    """Right-align each history in a ``max_len`` window, keeping the newest items.

    The interaction vector marks every item of the (untruncated) history.
    """
    B = len(examples)
    seqs = np.full((B, max_len), n_items, dtype=np.int64)
    inter = np.zeros((B, n_items), dtype=np.float64)
    targets = np.empty(B, dtype=np.int64)
    for b, ex in enumerate(examples):
        hist = ex.history[-max_len:]
        if hist:
            seqs[b, max_len - len(hist):] = hist
        inter[b, list(ex.history)] = 1.0
        targets[b] = ex.target
    if B and (targets.max() >= n_items or targets.min() < 0):
        raise DataError("target item out of range")
    seqs_t = torch.from_numpy(seqs)
    return Batch(seqs_t, seqs_t != n_items, torch.from_numpy(targets),
                 torch.from_numpy(inter).to(dtype), [ex.user for ex in examples])
