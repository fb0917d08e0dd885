"""2-Wasserstein distances between diagonal Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass
class GaussianEmbedding:
    """Diagonal Gaussians; ``cov_raw`` is mapped through ELU+1 to get the covariance."""

    mean: Tensor
    cov_raw: Tensor

    @property
    def cov(self) -> Tensor:
        return T.elu_plus_one(self.cov_raw)


def _check_positive(var: Tensor) -> None:
    if np.any(var.data <= 0):
        raise ContractError("Gaussian variances must be strictly positive")


def wasserstein2_diag(mu1, var1, mu2, var2) -> Tensor:
    """W2 between N(mu1, diag(var1)) and N(mu2, diag(var2)) over the last axis.

    W2^2 = |mu1 - mu2|^2 + |sqrt(var1) - sqrt(var2)|^2. Leading axes broadcast.
    """
    mu1, var1, mu2, var2 = map(T.as_tensor, (mu1, var1, mu2, var2))
    _check_positive(var1)
    _check_positive(var2)
    dm = mu1 - mu2
    ds = T.sqrt(var1) - T.sqrt(var2)
    return T.sqrt_nonneg((dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1))


def pairwise_wasserstein2(mu_a: Tensor, var_a: Tensor, mu_b: Tensor, var_b: Tensor) -> Tensor:
    """All-pairs W2 between rows: ``[..., n, d]`` x ``[..., m, d]`` -> ``[..., n, m]``.

    Differences are formed explicitly (not via the |a|^2 + |b|^2 - 2ab
    expansion) so that identical rows give exactly zero.
    """
    _check_positive(var_a)
    _check_positive(var_b)
    sd_a, sd_b = T.sqrt(var_a), T.sqrt(var_b)

    def expand(x: Tensor, axis: int) -> Tensor:
        shape = list(x.shape)
        shape.insert(x.ndim + axis, 1)
        return x.reshape(shape)

    dm = expand(mu_a, -1) - expand(mu_b, -2)
    ds = expand(sd_a, -1) - expand(sd_b, -2)
    return T.sqrt_nonneg((dm * dm).sum(axis=-1) + (ds * ds).sum(axis=-1))
