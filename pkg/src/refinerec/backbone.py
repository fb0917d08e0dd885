"""Self-attention sequence encoders: dot-product and stochastic (Wasserstein) variants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .gaussian import pairwise_wasserstein2, wasserstein2_diag
from .refine import MECHANISMS, RefinementParams, init_refinement, refinement_pipeline
from .tensor import Parameter, Tensor

BACKBONES = ("dot_product", "stochastic")


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "dot_product"
    mechanism: str = "none"
    d: int = 64
    n: int = 50
    heads: int = 1
    layers: int = 2
    dropout: float = 0.2
    learning_rate: float = 1e-3
    l2_weight: float = 0.0
    seed: int = 0
    refine_scale: str = "sqrt_d"   # or "sqrt_n"
    init_range: float = 0.02
    init_scheme: str = "xavier"   # or "uniform" (±init_range everywhere)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.mechanism == "stoc" and self.backbone != "stochastic":
            raise ConfigError("mechanism 'stoc' requires the stochastic backbone")
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        if self.d < 1 or self.heads < 1 or self.layers < 1:
            raise ConfigError("d, heads and layers must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.refine_scale not in ("sqrt_d", "sqrt_n"):
            raise ConfigError(f"refine_scale must be 'sqrt_d' or 'sqrt_n', got {self.refine_scale!r}")
        if self.init_scheme not in ("uniform", "xavier"):
            raise ConfigError(f"init_scheme must be 'uniform' or 'xavier', got {self.init_scheme!r}")
        if self.learning_rate <= 0 or self.l2_weight < 0 or self.init_range <= 0:
            raise ConfigError("learning_rate and init_range must be > 0, l2_weight >= 0")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class AttentionRecord:
    """Scores for one layer/head; arrays carry the batch axis first."""

    layer: int
    head: int
    A: np.ndarray
    B: Optional[np.ndarray]
    weights: np.ndarray


@dataclass
class EncodeResult:
    states: Tensor                 # [B, n, d]; mean for the stochastic backbone
    cov: Optional[Tensor]          # [B, n, d] effective covariance (stochastic only)
    records: list[AttentionRecord]


def init_uniform(shape: tuple, rng: np.random.Generator, config: ModelConfig,
                 matrix: bool = False) -> np.ndarray:
    """U(-r, r) with r = init_range, or the Xavier bound sqrt(6 / (fan_in + fan_out))
    for weight matrices when ``init_scheme == 'xavier'``."""
    r = config.init_range
    if matrix and config.init_scheme == "xavier":
        r = math.sqrt(6.0 / (shape[-2] + shape[-1]))
    return rng.uniform(-r, r, size=shape)


def attention_masks(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(valid [B, n], allowed [B, n, n])``: allowed[k, t] iff t <= k and both are real items."""
    valid = inputs > 0
    n = inputs.shape[-1]
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = causal & valid[..., None, :] & valid[..., :, None]
    return valid, allowed


def dot_attention_scores(H: Tensor, WQ, WK, d_head: Optional[int] = None) -> Tensor:
    """A = (H W_Q)(H W_K)^T / sqrt(d_head)."""
    d_head = d_head or T.as_tensor(WQ).shape[-1]
    return ((H @ WQ) @ (H @ WK).T) / math.sqrt(d_head)


def stochastic_attention_scores(mean: Tensor, cov_raw: Tensor, WQ_mean, WK_mean,
                                WQ_cov, WK_cov) -> Tensor:
    """A[k, t] = -W2(query distribution k, key distribution t)."""
    q_var = T.elu_plus_one(cov_raw @ WQ_cov)
    k_var = T.elu_plus_one(cov_raw @ WK_cov)
    return -pairwise_wasserstein2(mean @ WQ_mean, q_var, mean @ WK_mean, k_var)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _assert_positive(x: Tensor, live: Optional[np.ndarray] = None, what: str = "covariance") -> None:
    data = x.data if live is None else x.data[live]
    if np.any(data <= 0):
        raise ContractError(f"stochastic backbone produced a non-positive {what}")


class SeqRecModel:
    """Parameters and forward pass for either backbone, with optional refinement."""

    def __init__(self, config: ModelConfig, num_items: int):
        if num_items < 1:
            raise ConfigError("num_items must be >= 1")
        self.config = config
        self.num_items = num_items
        self.params: dict[str, Parameter] = {}
        self.refinement: list[RefinementParams] = []
        rng = np.random.default_rng(config.seed)
        self._init(rng)

    # -- parameters -----------------------------------------------------------
    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name)
        self.params[name] = p
        return p

    def _uniform(self, name, *shape, rng, matrix: bool = False) -> Parameter:
        return self._add(name, init_uniform(shape, rng, self.config, matrix))

    def _init(self, rng: np.random.Generator) -> None:
        c = self.config
        V, d, n = self.num_items + 1, c.d, c.n
        streams = ["mean", "cov"] if c.backbone == "stochastic" else [""]

        for s in streams:
            emb = self._uniform(f"item_{s or 'emb'}", V, d, rng=rng)
            emb.data[0] = 0.0
            self._uniform(f"pos_{s or 'emb'}", n, d, rng=rng)
        for layer in range(c.layers):
            for s in streams:
                sfx = f"_{s}" if s else ""
                for w in ("WQ", "WK", "WV"):
                    self._uniform(f"layer{layer}.{w}{sfx}", d, d, rng=rng, matrix=True)
                self._uniform(f"layer{layer}.ffn1{sfx}", d, d, rng=rng, matrix=True)
                self._add(f"layer{layer}.ffn1_b{sfx}", np.zeros(d))
                self._uniform(f"layer{layer}.ffn2{sfx}", d, d, rng=rng, matrix=True)
                self._add(f"layer{layer}.ffn2_b{sfx}", np.zeros(d))
                for ln in ("ln1", "ln2"):
                    self._add(f"layer{layer}.{ln}_g{sfx}", np.ones(d))
                    self._add(f"layer{layer}.{ln}_b{sfx}", np.zeros(d))
            ref = init_refinement(c.mechanism, c.heads, n, rng,
                                  lambda shape: init_uniform(shape, rng, c, matrix=True),
                                  f"layer{layer}.refine")
            for p in ref.parameters():
                self._register(p)
            self.refinement.append(ref)

    def _register(self, p: Parameter) -> None:
        if p.name in self.params:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ContractError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    # -- forward ----------------------------------------------------------------
    def _refine_scale(self) -> float:
        c = self.config
        return float(c.d_head if c.refine_scale == "sqrt_d" else c.n)

    def encode(self, inputs: np.ndarray, training: bool = False,
               rng: Optional[np.random.Generator] = None, record: bool = False) -> EncodeResult:
        """Encode left-padded id sequences ``[B, n]`` (or a single ``[n]``)."""
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim == 1:
            inputs = inputs[None]
        if inputs.shape[-1] > self.config.n:
            raise ContractError(f"sequence length {inputs.shape[-1]} exceeds n={self.config.n}")
        if inputs.shape[-1] < self.config.n:
            pad = np.zeros((inputs.shape[0], self.config.n - inputs.shape[1]), dtype=np.int64)
            inputs = np.concatenate([pad, inputs], axis=1)
        if inputs.min() < 0 or inputs.max() > self.num_items:
            raise ContractError("item id out of range")
        if self.config.backbone == "dot_product":
            return self._encode_dot(inputs, training, rng, record)
        return self._encode_stochastic(inputs, training, rng, record)

    def _ffn(self, x: Tensor, layer: int, sfx: str, training, rng) -> Tensor:
        p = self.params
        h = T.relu(x @ p[f"layer{layer}.ffn1{sfx}"] + p[f"layer{layer}.ffn1_b{sfx}"])
        h = h @ p[f"layer{layer}.ffn2{sfx}"] + p[f"layer{layer}.ffn2_b{sfx}"]
        return T.dropout(h, self.config.dropout, rng, training)

    def _ln(self, x: Tensor, layer: int, which: str, sfx: str) -> Tensor:
        p = self.params
        return T.layer_norm(x, p[f"layer{layer}.{which}_g{sfx}"], p[f"layer{layer}.{which}_b{sfx}"])

    def _records(self, layer, res, out: list) -> None:
        A, B, w = res.A.data, None if res.B is None else res.B.data, res.weights.data
        for h in range(A.shape[1]):
            out.append(AttentionRecord(layer, h, A[:, h].copy(),
                                       None if B is None else B[:, h].copy(), w[:, h].copy()))

    def _encode_dot(self, inputs, training, rng, record) -> EncodeResult:
        c, p = self.config, self.params
        valid, allowed = attention_masks(inputs)
        keep = valid[..., None]
        x = T.embedding(p["item_emb"], inputs) + p["pos_emb"]
        x = T.where(keep, T.dropout(x, c.dropout, rng, training))
        records: list[AttentionRecord] = []
        for layer in range(c.layers):
            pre = f"layer{layer}."
            q = _split_heads(x @ p[pre + "WQ"], c.heads)
            k = _split_heads(x @ p[pre + "WK"], c.heads)
            v = _split_heads(x @ p[pre + "WV"], c.heads)
            A = (q @ k.T) / math.sqrt(c.d_head)
            res = refinement_pipeline(A, allowed[:, None], c.mechanism, self.refinement[layer],
                                      v, self._refine_scale(), c.backbone)
            if record:
                self._records(layer, res, records)
            att = T.dropout(_merge_heads(res.output), c.dropout, rng, training)
            x = self._ln(x + att, layer, "ln1", "")
            x = self._ln(x + self._ffn(x, layer, "", training, rng), layer, "ln2", "")
            x = T.where(keep, x)
        return EncodeResult(x, None, records)

    def _encode_stochastic(self, inputs, training, rng, record) -> EncodeResult:
        c, p = self.config, self.params
        valid, allowed = attention_masks(inputs)
        keep = valid[..., None]
        m = T.embedding(p["item_mean"], inputs) + p["pos_mean"]
        s = T.embedding(p["item_cov"], inputs) + p["pos_cov"]
        m = T.where(keep, T.dropout(m, c.dropout, rng, training))
        s = T.where(keep, T.dropout(s, c.dropout, rng, training))
        records: list[AttentionRecord] = []
        for layer in range(c.layers):
            pre = f"layer{layer}."
            q_m = _split_heads(m @ p[pre + "WQ_mean"], c.heads)
            k_m = _split_heads(m @ p[pre + "WK_mean"], c.heads)
            v_m = _split_heads(m @ p[pre + "WV_mean"], c.heads)
            q_v = _split_heads(T.elu_plus_one(s @ p[pre + "WQ_cov"]), c.heads)
            k_v = _split_heads(T.elu_plus_one(s @ p[pre + "WK_cov"]), c.heads)
            v_v = _split_heads(T.elu_plus_one(s @ p[pre + "WV_cov"]), c.heads)
            for var in (q_v, k_v, v_v):
                _assert_positive(var)
            A = -pairwise_wasserstein2(q_m, q_v, k_m, k_v)
            res = refinement_pipeline(A, allowed[:, None], c.mechanism, self.refinement[layer],
                                      (v_m, v_v), self._refine_scale(), c.backbone)
            if record:
                self._records(layer, res, records)
            out_m, out_v = res.output
            _assert_positive(out_v, np.broadcast_to(valid[:, None, :], out_v.shape[:-1]),
                             "aggregated covariance")
            att_m = T.dropout(_merge_heads(out_m), c.dropout, rng, training)
            att_v = T.dropout(_merge_heads(out_v), c.dropout, rng, training)
            m = self._ln(m + att_m, layer, "ln1", "_mean")
            s = self._ln(s + att_v, layer, "ln1", "_cov")
            m = self._ln(m + self._ffn(m, layer, "_mean", training, rng), layer, "ln2", "_mean")
            s = self._ln(s + self._ffn(s, layer, "_cov", training, rng), layer, "ln2", "_cov")
            m, s = T.where(keep, m), T.where(keep, s)
        cov = T.elu_plus_one(s)
        _assert_positive(cov)
        return EncodeResult(m, cov, records)

    # -- scoring ----------------------------------------------------------------
    def item_distribution(self, ids) -> tuple[Tensor, Tensor]:
        p = self.params
        return T.embedding(p["item_mean"], ids), T.elu_plus_one(T.embedding(p["item_cov"], ids))

    def score_items(self, enc: EncodeResult, ids: np.ndarray) -> Tensor:
        """Scores of candidate ``ids [B, n, ...]`` against the state at each position.

        Dot backbone: inner product with the item embedding. Stochastic: minus
        the W2 distance between the state and item distributions.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() > self.num_items):
            raise ContractError("unknown item id")
        extra = ids.ndim - enc.states.ndim + 1

        def lift(x: Tensor) -> Tensor:
            return x.reshape(x.shape[:-1] + (1,) * extra + x.shape[-1:])

        if self.config.backbone == "dot_product":
            return (lift(enc.states) * T.embedding(self.params["item_emb"], ids)).sum(axis=-1)
        mu, var = self.item_distribution(ids)
        return -wasserstein2_diag(lift(enc.states), lift(enc.cov), mu, var)

    def score_all(self, state: np.ndarray, cov: Optional[np.ndarray] = None,
                  chunk: int = 256) -> np.ndarray:
        """Scores ``[U, num_items + 1]`` for every item given per-user final states (no tape)."""
        with T.no_grad():
            if self.config.backbone == "dot_product":
                return state @ self.params["item_emb"].data.T
            ids = np.arange(self.num_items + 1)
            mu, var = self.item_distribution(ids)
            out = np.empty((state.shape[0], self.num_items + 1))
            for start in range(0, state.shape[0], chunk):
                sl = slice(start, start + chunk)
                out[sl] = -pairwise_wasserstein2(T.Tensor(state[sl]), T.Tensor(cov[sl]), mu, var).data
            return out

    def score_histories(self, inputs: np.ndarray) -> np.ndarray:
        """Full-vocabulary scores for the position after each left-padded history."""
        with T.no_grad():
            enc = self.encode(inputs)
            last = enc.states.data[:, -1]
            cov = None if enc.cov is None else enc.cov.data[:, -1]
        return self.score_all(last, cov)
