"""Leave-one-out ranking evaluation: Recall@N and NDCG@N."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import SplitDataset, left_pad
from .errors import ConfigError, ContractError


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_users_evaluated: int
    ranking_mode: str
    ranks: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "metrics": {str(k): {"recall": self.recall[k], "ndcg": self.ndcg[k]} for k in sorted(self.recall)},
            "num_users_evaluated": self.num_users_evaluated,
            "ranking_mode": self.ranking_mode,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        m = raw["metrics"]
        return cls({int(k): v["recall"] for k, v in m.items()}, {int(k): v["ndcg"] for k, v in m.items()},
                   raw["num_users_evaluated"], raw["ranking_mode"])


def rank_target(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``scores[target]``; ties count against the target."""
    scores = np.asarray(scores)
    if not 0 <= target < scores.shape[-1]:
        raise ContractError(f"target {target} is not among the candidates")
    return int(np.sum(scores >= scores[target]))


def metrics_at(ranks: Iterable[int], N: int) -> tuple[float, float]:
    """Recall@N and NDCG@N for single-target ranks (ideal DCG is 1)."""
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}")
    ranks = np.asarray(list(ranks), dtype=np.int64)
    if ranks.size == 0:
        return 0.0, 0.0
    if ranks.min() < 1:
        raise ContractError("ranks are 1-based")
    hit = ranks <= N
    gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(hit.mean()), float(gains.mean())


def parse_mode(mode: Union[str, tuple]) -> tuple[str, int]:
    """'full' -> ('full', 0); 'sampled:100' or ('sampled', 100) -> ('sampled', 100)."""
    if isinstance(mode, tuple):
        kind, k = mode
    elif mode == "full":
        kind, k = "full", 0
    elif isinstance(mode, str) and mode.startswith("sampled:"):
        kind, k = "sampled", int(mode.split(":", 1)[1])
    else:
        raise ConfigError(f"ranking mode must be 'full' or 'sampled:<k>', got {mode!r}")
    if kind == "sampled" and k < 1:
        raise ConfigError("sampled ranking needs at least one negative")
    if kind not in ("full", "sampled"):
        raise ConfigError(f"unknown ranking mode {kind!r}")
    return kind, k


def history_inputs(split: SplitDataset, target: str) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    hist = [split.history(r, target) for r in range(len(split))]
    inputs = np.stack([left_pad(h, split.n) for h in hist]) if hist else np.zeros((0, split.n), np.int64)
    targets = np.asarray(split.valid_target if target == "valid" else split.test_target, dtype=np.int64)
    return inputs, targets, hist


def evaluate(model, split: SplitDataset, target: str = "test", Ns: Sequence[int] = (1, 5, 10, 20),
             ranking_mode: Union[str, tuple] = "full", seed: int = 0, batch_size: int = 1024,
             keep_ranks: bool = False) -> MetricsReport:
    """Rank each user's held-out item given the preceding history.

    ``model`` only needs ``score_histories(inputs [U, n]) -> scores [U, num_items + 1]``.
    Items already in the user's history are excluded unless they are the target.
    """
    kind, k = parse_mode(ranking_mode)
    inputs, targets, hist = history_inputs(split, target)
    V = split.num_items
    rng = np.random.default_rng(seed)
    ranks = np.empty(len(targets), dtype=np.int64)
    for start in range(0, len(targets), batch_size):
        sl = slice(start, start + batch_size)
        scores = np.array(model.score_histories(inputs[sl]), dtype=np.float64)
        if scores.shape != (len(targets[sl]), V + 1):
            raise ContractError(f"score_histories returned shape {scores.shape}")
        for i, row in enumerate(range(start, start + len(targets[sl]))):
            tgt = targets[row]
            seen = np.fromiter((h for h in hist[row] if h != tgt), dtype=np.int64)
            if kind == "full":
                s = scores[i].copy()
                s[0] = -np.inf
                s[seen] = -np.inf
                ranks[row] = rank_target(s, tgt)
            else:
                banned = np.zeros(V + 1, dtype=bool)
                banned[0] = banned[tgt] = True
                banned[seen] = True
                pool = np.flatnonzero(~banned)
                negs = rng.choice(pool, size=min(k, len(pool)), replace=False)
                cand = np.concatenate([[tgt], negs])
                ranks[row] = rank_target(scores[i, cand], 0)

    recall, ndcg = {}, {}
    for N in sorted(set(Ns)):
        recall[N], ndcg[N] = metrics_at(ranks, N)
    mode_name = "full" if kind == "full" else f"sampled({k})"
    return MetricsReport(recall, ndcg, len(targets), mode_name, ranks if keep_ranks else None)


class PopularityModel:
    """Scores every item by its training-set frequency, ignoring the history."""

    def __init__(self, split: SplitDataset):
        counts = np.zeros(split.num_items + 1)
        for seq in split.train:
            np.add.at(counts, np.asarray(seq, dtype=np.int64), 1.0)
        self.counts = counts

    def score_histories(self, inputs: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.counts, (len(inputs), len(self.counts)))


def format_table(reports: dict[str, MetricsReport], Ns: Sequence[int] = (1, 5, 10, 20)) -> str:
    """Plain-text table of Recall@N / NDCG@N, one row per model."""
    cols = [f"Re@{N}" for N in Ns] + [f"Nd@{N}" for N in Ns]
    width = max([len(name) for name in reports] + [5])
    lines = [" ".join([f"{'model':<{width}}"] + [f"{c:>8}" for c in cols])]
    for name, rep in reports.items():
        vals = [rep.recall.get(N, math.nan) for N in Ns] + [rep.ndcg.get(N, math.nan) for N in Ns]
        lines.append(" ".join([f"{name:<{width}}"] + [f"{v:8.4f}" for v in vals]))
    return "\n".join(lines)
