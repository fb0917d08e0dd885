"""Second-level attention: transforming the score matrix A into refined scores B.

All functions accept leading batch/head axes in front of the ``n x n``
matrices; refinement weights broadcast against them (stored as
``[heads, n, n]`` so every head owns its matrices).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .gaussian import pairwise_wasserstein2
from .tensor import Parameter, Tensor

MECHANISMS = ("none", "simp", "value", "add", "stoc")

# refinement matrices per head per layer, in units of n^2
_MATRICES = {"none": 0, "simp": 2, "value": 3, "add": 2, "stoc": 2}


@dataclass
class RefinementParams:
    WRQ: Optional[Parameter] = None
    WRK: Optional[Parameter] = None
    WRV: Optional[Parameter] = None
    Wmu_R: Optional[Parameter] = None
    Wsigma_R: Optional[Parameter] = None

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.WRQ, self.WRK, self.WRV, self.Wmu_R, self.Wsigma_R) if p is not None]


def init_refinement(mechanism: str, heads: int, n: int, rng: np.random.Generator,
                    sampler, prefix: str) -> RefinementParams:
    """``sampler(shape)`` draws the initial values of each ``[heads, n, n]`` matrix."""
    def mat(name):
        return Parameter(sampler((heads, n, n)), f"{prefix}.{name}")

    if mechanism == "none":
        return RefinementParams()
    if mechanism in ("simp", "add"):
        return RefinementParams(WRQ=mat("WRQ"), WRK=mat("WRK"))
    if mechanism == "value":
        return RefinementParams(WRQ=mat("WRQ"), WRK=mat("WRK"), WRV=mat("WRV"))
    if mechanism == "stoc":
        return RefinementParams(Wmu_R=mat("Wmu_R"), Wsigma_R=mat("Wsigma_R"))
    raise ConfigError(f"unknown mechanism {mechanism!r}")


def parameter_count(config) -> int:
    """Number of extra trainable scalars the refinement adds to a model."""
    return config.layers * config.heads * _MATRICES[config.mechanism] * config.n ** 2


# ---------------------------------------------------------------------------
# the four mechanisms
# ---------------------------------------------------------------------------

def sanitize_scores(A: Tensor, allowed: np.ndarray) -> Tensor:
    """Zero out disallowed (future or padding) entries so they cannot enter W @ A products."""
    return T.where(allowed, A, 0.0)


def refine_simp(A: Tensor, WRQ, WRK, d: float) -> Tensor:
    """B = (A W_RQ)(A W_RK)^T / sqrt(d): rows of A act as new queries and keys."""
    return ((A @ WRQ) @ (A @ WRK).T) / math.sqrt(d)


def refine_value(A: Tensor, WRQ, WRK, WRV) -> Tensor:
    """B = (W_RV A) softmax_rows((W_RK A)^T (W_RQ A)), evaluated on the whole matrix.

    Left-multiplying by the n x n weights mixes rows from every position, so
    this form sees the future; the attention pipeline uses
    :func:`refine_value_causal`.
    """
    inner = T.softmax_rows((WRK @ A).T @ (WRQ @ A))
    return (WRV @ A) @ inner


def refine_value_causal(A: Tensor, WRQ, WRK, WRV) -> Tensor:
    """Row k of :func:`refine_value` applied to A with rows after k zeroed.

    Each query position only ever sees the attention rows of its own prefix.
    The last row coincides with :func:`refine_value` on the full matrix.
    """
    n = A.shape[-1]
    lower = np.tril(np.ones((n, n), dtype=bool))
    # row k of W_RV @ A_prefix(k) only touches rows i <= k
    vrows = T.where(lower, T.as_tensor(WRV)) @ A                   # [..., n(k), n]
    # A_prefix[..., k, i, :] = A[..., i, :] if i <= k else 0
    prefix_mask = lower[:, :, None]                                 # [n(k), n(i), 1]
    Ap = T.where(prefix_mask, A.reshape(A.shape[:-2] + (1, n, n)))  # [..., n, n, n]
    WRQ_, WRK_ = _lift(WRQ), _lift(WRK)
    inner = T.softmax_rows((WRK_ @ Ap).T @ (WRQ_ @ Ap))             # [..., n(k), n, n]
    out = vrows.reshape(vrows.shape[:-1] + (1, n)) @ inner          # [..., n(k), 1, n]
    return out.reshape(out.shape[:-2] + (n,))


def _lift(W) -> Tensor:
    W = T.as_tensor(W)
    return W.reshape(W.shape[:-2] + (1,) + W.shape[-2:])


def refine_add(A: Tensor, WRQ, WRK, d: float) -> Tensor:
    """B = (refine_simp(A) + A) / 2: averages second- and first-level scores."""
    return (refine_simp(A, WRQ, WRK, d) + A) * 0.5


def refine_stoc(A: Tensor, Wmu_R, Wsigma_R) -> Tensor:
    """Each row of A becomes a diagonal Gaussian; B is minus the pairwise W2 between them."""
    mu = A @ Wmu_R
    var = T.elu_plus_one(A @ Wsigma_R)
    return -pairwise_wasserstein2(mu, var, mu, var)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

Values = Union[Tensor, tuple]


def aggregate_values(weights: Tensor, values: Values) -> Values:
    """Mix value rows by the attention weights. A ``(mean, cov)`` pair mixes both."""
    if isinstance(values, tuple):
        return tuple(weights @ v for v in values)
    return weights @ values


def softmax_mask(allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mask for the outer softmax plus the rows that are real queries.

    Rows with no allowed entry (padding queries) are given their own diagonal
    so the softmax is defined; their weights are zeroed afterwards.
    """
    live = allowed.any(axis=-1)
    n = allowed.shape[-1]
    smask = allowed | (~live[..., None] & np.eye(n, dtype=bool))
    return smask, live


def refine_scores(A: Tensor, mechanism: str, params: RefinementParams, d: float,
                  causal: bool = True) -> Tensor:
    if mechanism == "simp":
        return refine_simp(A, params.WRQ, params.WRK, d)
    if mechanism == "value":
        fn = refine_value_causal if causal else refine_value
        return fn(A, params.WRQ, params.WRK, params.WRV)
    if mechanism == "add":
        return refine_add(A, params.WRQ, params.WRK, d)
    if mechanism == "stoc":
        return refine_stoc(A, params.Wmu_R, params.Wsigma_R)
    raise ConfigError(f"unknown mechanism {mechanism!r}")


@dataclass
class PipelineResult:
    weights: Tensor
    A: Tensor                  # scores with disallowed entries zeroed
    B: Optional[Tensor]
    output: Values


def refinement_pipeline(A_raw: Tensor, allowed: np.ndarray, mechanism: str,
                        params: RefinementParams, values: Values, d: float,
                        backbone: str = "dot_product") -> PipelineResult:
    """Masked (optionally refined) attention from raw scores to aggregated values."""
    if mechanism == "stoc" and backbone != "stochastic":
        raise ConfigError("mechanism 'stoc' requires the stochastic backbone")
    allowed = np.broadcast_to(allowed, A_raw.shape)
    smask, live = softmax_mask(allowed)
    A = sanitize_scores(A_raw, allowed)
    if mechanism == "none":
        B = None
        w = T.softmax_rows(A_raw, smask)
    else:
        B = sanitize_scores(refine_scores(A, mechanism, params, d), allowed)
        w = T.softmax_rows(B, smask)
    w = T.where(live[..., None], w, 0.0)
    return PipelineResult(w, A, B, aggregate_values(w, values))
