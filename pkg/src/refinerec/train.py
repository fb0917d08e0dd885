"""Training loop: BCE with sampled negatives, Adam, early stopping on validation NDCG@5."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .backbone import ModelConfig, SeqRecModel
from .checkpoint import read_archive, save_checkpoint, write_archive
from .data import SplitDataset, batch_iter
from .errors import ConfigError, ContractError, NonFiniteError
from .evaluation import evaluate, parse_mode
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)


def bce_loss(pos: Tensor, neg: Tensor, mask: np.ndarray) -> Tensor:
    """-sum(log s(pos) + sum_k log(1 - s(neg))) over unmasked positions / their count."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("bce_loss: every position is masked")
    per_pos = T.log_sigmoid(pos) + T.log_sigmoid(-neg).sum(axis=-1)
    return -(T.where(mask, per_pos).sum()) / count


def global_grad_norm(params) -> float:
    """L2 norm of all parameter gradients taken together (missing grads count as 0)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


class Adam:
    """Adam with bias correction; L2 enters as a loss-side penalty ``l2/2 * |w|^2``."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, l2_weight: float = 0.0):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("parameters registered with the optimizer more than once")
        self.params = list(params)
        self.lr, self.betas, self.eps, self.l2_weight = lr, betas, eps, l2_weight
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        b1, b2 = self.betas
        grads = {}
        for p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
            if self.l2_weight:
                g = g + self.l2_weight * p.data
            grads[p.name] = g
        self.t += 1
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    num_negatives: int = 1
    max_epochs: int = 200
    patience: int = 20
    eval_mode: str = "full"

    def __post_init__(self):
        if self.batch_size < 1 or self.num_negatives < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, num_negatives, max_epochs and patience must be >= 1")
        parse_mode(self.eval_mode)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class TrainState:
    epoch: int = 0
    best_valid_ndcg5: float = -math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)

    def update(self, score: float) -> bool:
        """Record a validation score; True when it strictly beats the best so far."""
        if score > self.best_valid_ndcg5:
            self.best_valid_ndcg5 = score
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False


@dataclass
class FitResult:
    model: SeqRecModel
    state: TrainState


Evaluator = Callable[[SeqRecModel], float]

LOG_FIELDS = ("epoch", "train_loss", "valid_ndcg5", "grad_norm", "seconds")


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train_epoch(model: SeqRecModel, opt: Adam, split: SplitDataset, cfg: TrainConfig,
                epoch: int) -> tuple[float, float]:
    """One pass over the training users; returns (mean loss, mean global grad norm)."""
    seed = _epoch_seed(model.config.seed, epoch)
    drop_rng = np.random.default_rng([seed, 1])
    losses, norms = [], []
    for batch in batch_iter(split, cfg.batch_size, cfg.num_negatives, seed=seed):
        model.zero_grad()
        enc = model.encode(batch.inputs, training=True, rng=drop_rng)
        loss = bce_loss(model.score_items(enc, batch.positives),
                        model.score_items(enc, batch.negatives), batch.mask)
        if not math.isfinite(loss.item()):
            raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        norms.append(global_grad_norm(model.parameters()))
        opt.step()
        losses.append(loss.item())
    if not losses:
        raise ContractError("no training user has a next-item target")
    return float(np.mean(losses)), float(np.mean(norms))


def _save_state(path: Path, model: SeqRecModel, opt: Adam, best: dict, state: TrainState,
                cfg: TrainConfig) -> None:
    meta = {"config": model.config.to_dict(), "num_items": model.num_items,
            "train_config": asdict(cfg), "state": asdict(state), "adam_t": opt.t}
    meta["state"]["best_valid_ndcg5"] = state.best_valid_ndcg5 if math.isfinite(state.best_valid_ndcg5) else None
    write_archive(path, meta, {"param": model.state_dict(), "best": best,
                               "adam_m": opt.m, "adam_v": opt.v})


def _load_state(path: Path, model: SeqRecModel, opt: Adam) -> tuple[dict, TrainState]:
    meta, groups = read_archive(path)
    if meta["config"] != model.config.to_dict():
        raise ConfigError(f"{path} was written for a different model config")
    model.load_state_dict(groups["param"])
    opt.t = int(meta["adam_t"])
    opt.m = {k: v.copy() for k, v in groups["adam_m"].items()}
    opt.v = {k: v.copy() for k, v in groups["adam_v"].items()}
    raw = dict(meta["state"])
    if raw["best_valid_ndcg5"] is None:
        raw["best_valid_ndcg5"] = -math.inf
    return {k: v.copy() for k, v in groups.get("best", {}).items()}, TrainState(**raw)


def fit(config: Union[ModelConfig, SeqRecModel], split: SplitDataset,
        train_config: Optional[TrainConfig] = None, evaluator: Optional[Evaluator] = None,
        run_dir=None, resume: bool = False,
        on_epoch_end: Optional[Callable[[TrainState], None]] = None) -> FitResult:
    """Train until validation NDCG@5 stalls for ``patience`` epochs; return the best snapshot.

    With ``run_dir`` set, every epoch appends a JSON line to ``train_log.jsonl``
    and rewrites ``state.npz`` (resumable) and ``best.npz`` (a checkpoint).
    Epoch randomness is derived from ``(seed, epoch)``, so a resumed run
    follows the same trajectory as an uninterrupted one.
    """
    cfg = train_config or TrainConfig()
    model = config if isinstance(config, SeqRecModel) else SeqRecModel(config, split.num_items)
    if model.num_items != split.num_items:
        raise ConfigError("model vocabulary does not match the dataset")
    if evaluator is None:
        def evaluator(m):
            return evaluate(m, split, "valid", Ns=(5,), ranking_mode=cfg.eval_mode).ndcg[5]

    opt = Adam(model.parameters(), model.config.learning_rate, l2_weight=model.config.l2_weight)
    state = TrainState(seed=model.config.seed)
    best = model.state_dict()

    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = state_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path, state_path = run_dir / "train_log.jsonl", run_dir / "state.npz"
        if resume and state_path.exists():
            best, state = _load_state(state_path, model, opt)
            logger.info("resuming from epoch %d", state.epoch)
        with log_path.open("w") as fh:
            for rec in state.history:
                fh.write(json.dumps(rec) + "\n")

    while state.epoch < cfg.max_epochs and state.epochs_since_improvement < cfg.patience:
        t0 = time.perf_counter()
        state.epoch += 1
        loss, norm = train_epoch(model, opt, split, cfg, state.epoch)
        score = float(evaluator(model))
        if state.update(score):
            best = model.state_dict()
        rec = {"epoch": state.epoch, "train_loss": loss, "valid_ndcg5": score,
               "grad_norm": norm, "seconds": time.perf_counter() - t0}
        state.history.append(rec)
        logger.info("epoch %d loss %.5f valid NDCG@5 %.4f |g| %.4f", state.epoch, loss, score, norm)
        if run_dir is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
            _save_state(state_path, model, opt, best, state, cfg)
            if state.best_epoch == state.epoch:
                save_checkpoint(run_dir / "best.npz", model, {"epoch": state.epoch})
        if on_epoch_end is not None:
            on_epoch_end(state)

    model.load_state_dict(best)
    return FitResult(model, state)
