"""Interaction logs, k-core filtering, leave-one-out splits and batching."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_COLUMNS = {"user": "user_id", "item": "item_id", "timestamp": "timestamp"}


@dataclass
class InteractionLog:
    """Raw ``(user, item, timestamp)`` triples in file order."""

    records: list[tuple[str, str, int]]
    malformed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SequenceDataset:
    user_ids: list[str]           # index -> original user id
    item_ids: list[str]           # index i -> original id of item i + 1 (0 is padding)
    sequences: list[list[int]]    # chronological item indices per user
    n: int

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)


@dataclass
class SplitDataset:
    """Leave-one-out split. ``users[i]`` is the dataset user index of row i."""

    users: list[int]
    train: list[list[int]]
    valid_target: list[int]
    test_target: list[int]
    num_items: int
    n: int
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.users)

    def history(self, row: int, target: str) -> list[int]:
        """Items visible when predicting ``target`` ('valid' or 'test') for ``row``."""
        if target == "valid":
            return list(self.train[row])
        if target == "test":
            return list(self.train[row]) + [self.valid_target[row]]
        raise ConfigError(f"unknown target {target!r}; expected 'valid' or 'test'")

    def row_of_user(self, user_id: str) -> int:
        try:
            return self.users.index(self.user_ids.index(user_id))
        except ValueError:
            raise DataError(f"user {user_id!r} not in the split") from None


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def ingest_csv(path, columns: Optional[dict] = None, max_malformed: float = 0.01) -> InteractionLog:
    """Read a headered, comma-separated UTF-8 file of interactions.

    Rows with missing fields or a non-integer/negative timestamp are counted
    as malformed and skipped; more than ``max_malformed`` (fraction of data
    rows) is an error. Exact duplicate triples are kept once.
    """
    cols = dict(DEFAULT_COLUMNS, **(columns or {}))
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    records: list[tuple[str, str, int]] = []
    seen: set[tuple[str, str, int]] = set()
    malformed = total = 0
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cols.values() if reader.fieldnames is None or c not in reader.fieldnames]
        if reader.fieldnames is None:
            raise DataError(f"{path}: no records")
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            total += 1
            user, item, ts = row.get(cols["user"]), row.get(cols["item"]), row.get(cols["timestamp"])
            try:
                if not user or not item or ts is None:
                    raise ValueError
                ts_int = int(ts)
                if ts_int < 0:
                    raise ValueError
            except ValueError:
                malformed += 1
                continue
            rec = (user.strip(), item.strip(), ts_int)
            if rec in seen:
                continue
            seen.add(rec)
            records.append(rec)

    if total == 0:
        raise DataError(f"{path}: no records")
    if malformed:
        logger.warning("%s: skipped %d malformed row(s) of %d", path, malformed, total)
        if malformed / total > max_malformed:
            raise DataError(f"{path}: {malformed}/{total} malformed rows exceeds {max_malformed:.1%}")
    if not records:
        raise DataError(f"{path}: no records")
    return InteractionLog(records, malformed=malformed)


def write_csv(log: InteractionLog, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([DEFAULT_COLUMNS["user"], DEFAULT_COLUMNS["item"], DEFAULT_COLUMNS["timestamp"]])
        w.writerows(log.records)


# ---------------------------------------------------------------------------
# filtering and sequences
# ---------------------------------------------------------------------------

def five_core_filter(log: InteractionLog, min_count: int = 5, mode: str = "both") -> InteractionLog:
    """Drop users (and, in ``both`` mode, items) below ``min_count`` until nothing changes."""
    if mode not in ("both", "user"):
        raise ConfigError(f"k-core mode must be 'both' or 'user', got {mode!r}")
    records = list(log.records)
    while True:
        users = Counter(r[0] for r in records)
        kept = [r for r in records if users[r[0]] >= min_count]
        if mode == "both":
            items = Counter(r[1] for r in kept)
            kept = [r for r in kept if items[r[1]] >= min_count]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise DataError(f"{min_count}-core filtering removed every interaction")
    return InteractionLog(records, malformed=log.malformed, meta=dict(log.meta))


def build_sequences(log: InteractionLog, n: int) -> SequenceDataset:
    """Group by user in first-appearance order, sort by time, keep the last ``n + 2`` items."""
    if n < 2:
        raise ConfigError(f"max sequence length n must be >= 2, got {n}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: list[list[tuple[int, int, int]]] = []
    for pos, (user, item, ts) in enumerate(log.records):
        if user not in user_index:
            user_index[user] = len(user_index)
            per_user.append([])
        if item not in item_index:
            item_index[item] = len(item_index) + 1
        per_user[user_index[user]].append((ts, pos, item_index[item]))

    sequences = []
    for events in per_user:
        events.sort()  # (timestamp, file position): ties keep file order
        sequences.append([it for _, _, it in events][-(n + 2):])
    return SequenceDataset(list(user_index), list(item_index), sequences, n)


def leave_one_out_split(ds: SequenceDataset) -> SplitDataset:
    """Last item to test, second-last to validation, the rest to training."""
    users, train, valid, test = [], [], [], []
    dropped = 0
    for u, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            dropped += 1
            continue
        users.append(u)
        train.append(seq[:-2])
        valid.append(seq[-2])
        test.append(seq[-1])
    if dropped:
        logger.warning("dropped %d user(s) with fewer than 3 interactions", dropped)
    return SplitDataset(users, train, valid, test, ds.num_items, ds.n,
                        user_ids=list(ds.user_ids), item_ids=list(ds.item_ids))


def dataset_stats(ds: SequenceDataset) -> dict:
    interactions = sum(len(s) for s in ds.sequences)
    users, items = ds.num_users, ds.num_items
    return {
        "users": users,
        "items": items,
        "interactions": interactions,
        "density": interactions / (users * items) if users and items else 0.0,
        "avg_length": interactions / users if users else 0.0,
    }


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def generate_synthetic(num_users: int, num_items: int, seq_len: int,
                       order2_strength: float, seed: int) -> InteractionLog:
    """Sequences whose next item is ``f(item two steps back)`` with probability
    ``order2_strength`` and uniform otherwise, ``f`` a fixed random permutation.

    The permutation and the realised rule frequency are stored in ``meta``.
    """
    if not 0.0 <= order2_strength <= 1.0:
        raise ConfigError(f"order2_strength must lie in [0, 1], got {order2_strength}")
    if num_items < 20:
        raise ConfigError(f"num_items must be >= 20, got {num_items}")
    if seq_len < 3 or num_users < 1:
        raise ConfigError("need num_users >= 1 and seq_len >= 3")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_items)
    seqs = np.empty((num_users, seq_len), dtype=np.int64)
    seqs[:, :2] = rng.integers(0, num_items, size=(num_users, 2))
    rule_hits = 0
    for t in range(2, seq_len):
        follow = rng.random(num_users) < order2_strength
        uniform = rng.integers(0, num_items, size=num_users)
        seqs[:, t] = np.where(follow, perm[seqs[:, t - 2]], uniform)
        rule_hits += int(np.sum(seqs[:, t] == perm[seqs[:, t - 2]]))

    records = [(f"u{u}", f"i{seqs[u, t]}", t) for u in range(num_users) for t in range(seq_len)]
    meta = {
        "permutation": perm.tolist(),
        "order2_strength": order2_strength,
        "rule_frequency": rule_hits / (num_users * (seq_len - 2)),
        "seed": seed,
    }
    return InteractionLog(records, meta=meta)


def rule_frequency(sequences: list[list[int]], rule: dict[int, int]) -> float:
    """Fraction of positions t >= 2 whose item equals ``rule[item at t-2]``."""
    hits = total = 0
    for seq in sequences:
        for t in range(2, len(seq)):
            total += 1
            hits += rule.get(seq[t - 2]) == seq[t]
    return hits / total if total else 0.0


def planted_rule(meta: dict, item_ids: list[str]) -> dict[int, int]:
    """The generator's permutation re-expressed in dataset item indices."""
    perm = meta.get("permutation")
    if perm is None:
        return {}
    index = {raw: i + 1 for i, raw in enumerate(item_ids)}
    rule = {}
    for src, dst in enumerate(perm):
        a, b = index.get(f"i{src}"), index.get(f"i{dst}")
        if a is not None and b is not None:
            rule[a] = b
    return rule


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

DATASET_FORMAT = "refinerec-dataset-v1"


def save_dataset(ds: SequenceDataset, path, meta: Optional[dict] = None) -> str:
    """Write ``ds`` as JSON; returns the SHA-256 of the written bytes."""
    payload = {"format": DATASET_FORMAT, "n": ds.n, "user_ids": ds.user_ids,
               "item_ids": ds.item_ids, "sequences": ds.sequences, "meta": meta or {}}
    raw = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_dataset(path) -> tuple[SequenceDataset, dict]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or raw.get("format") != DATASET_FORMAT:
        raise DataError(f"{path} is not a {DATASET_FORMAT} file")
    ds = SequenceDataset(list(raw["user_ids"]), list(raw["item_ids"]),
                         [list(map(int, s)) for s in raw["sequences"]], int(raw["n"]))
    return ds, dict(raw.get("meta", {}))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray      # [B, n] item ids, left-padded with 0
    positives: np.ndarray   # [B, n] next item per position, 0 where masked
    negatives: np.ndarray   # [B, n, k]
    mask: np.ndarray        # [B, n] True where the position contributes to the loss


def left_pad(seq: list[int], n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    tail = seq[-n:] if n else []
    if tail:
        out[n - len(tail):] = tail
    return out


def training_arrays(split: SplitDataset) -> tuple[np.ndarray, np.ndarray]:
    """Shifted input/target matrices for every user that has at least one target."""
    rows = [s for s in split.train if len(s) >= 2]
    inputs = np.stack([left_pad(s[:-1], split.n) for s in rows]) if rows else np.zeros((0, split.n), np.int64)
    targets = np.stack([left_pad(s[1:], split.n) for s in rows]) if rows else np.zeros((0, split.n), np.int64)
    return inputs, targets


def sample_negatives(positives: np.ndarray, num_items: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from items ``1..num_items`` that differ from the positive."""
    pos = positives[..., None]
    neg = rng.integers(1, num_items + 1, size=positives.shape + (k,))
    clash = neg == pos
    while clash.any():
        neg[clash] = rng.integers(1, num_items + 1, size=int(clash.sum()))
        clash = neg == pos
    return neg


def batch_iter(split: SplitDataset, batch_size: int, num_negatives: int = 1,
               seed: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if split.num_items < 2:
        raise DataError("negative sampling needs at least two items")
    rng = np.random.default_rng(seed)
    inputs, targets = training_arrays(split)
    order = rng.permutation(len(inputs)) if shuffle else np.arange(len(inputs))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        pos = targets[idx]
        neg = sample_negatives(pos, split.num_items, num_negatives, rng)
        mask = pos > 0
        neg[~mask] = 0
        yield Batch(inputs[idx], pos, neg, mask)
