"""Switchable normalization: one learned mixture of pool statistics.

The mixture weights are shared by every sample of the dataset, which is the
static counterpart of the per-sample ratios in `exnorm.exemplarnorm`.
"""

from __future__ import annotations

__all__ = ["SNParams", "sn_forward", "sn_init", "sn_param_count", "sn_ratios"]

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import structlog

from exnorm.normalizers import DEFAULT_EPS, StatsBundle, affine_transform
from exnorm.tensor import Tensor, broadcast_to, reshape, softmax_rows, sqrt
from exnorm.types import NormalizerConfigError

logger = structlog.get_logger(__name__)


@dataclass
class SNParams:
    """Learnable parameters of one switchable normalization layer."""

    gamma: Tensor
    beta: Tensor
    mean_logits: Tensor
    var_logits: Optional[Tensor] = None
    """Variance logits; ``None`` when they are tied to the mean logits."""

    @property
    def tied(self) -> bool:
        return self.var_logits is None

    @property
    def k(self) -> int:
        return self.mean_logits.size

    def parameters(self) -> List[Tensor]:
        params = [self.gamma, self.beta, self.mean_logits]
        if self.var_logits is not None:
            params.append(self.var_logits)
        return params


def sn_init(
    channels: int,
    k: int,
    tied: bool = False,
    dtype: type = np.float32,
    prefix: str = "",
) -> SNParams:
    """Unit scale, zero shift and zero logits (uniform mixture)."""
    if k < 2:
        raise NormalizerConfigError(
            f"SN needs at least two normalizers, k={k}"
        )

    def param(name: str, values: np.ndarray) -> Tensor:
        return Tensor(values, requires_grad=True, name=prefix + name)

    return SNParams(
        gamma=param("gamma", np.ones(channels, dtype=dtype)),
        beta=param("beta", np.zeros(channels, dtype=dtype)),
        mean_logits=param("mean_logits", np.zeros(k, dtype=dtype)),
        var_logits=(
            None if tied else param("var_logits", np.zeros(k, dtype=dtype))
        ),
    )


def sn_param_count(channels: int, k: int, tied: bool = False) -> int:
    return 2 * channels + (k if tied else 2 * k)


def sn_ratios(p: SNParams) -> Tuple[Tensor, Tensor]:
    """Mean and variance mixture weights, each on the K-simplex."""
    k = p.k
    mean_ratios = reshape(softmax_rows(reshape(p.mean_logits, (1, k))), (k,))
    if p.var_logits is None:
        return mean_ratios, mean_ratios
    var_ratios = reshape(softmax_rows(reshape(p.var_logits, (1, k))), (k,))
    return mean_ratios, var_ratios


def sn_forward(
    x: Tensor, p: SNParams, stats: StatsBundle, eps: float = DEFAULT_EPS
) -> Tensor:
    """``gamma * (x - sum λ_k μ_k) / sqrt(sum λ'_k σ²_k + eps) + beta``.

    The mixed moments are expanded to one value per sample and channel,
    the finest granularity any pool member produces.
    """
    if len(stats) != p.k:
        raise NormalizerConfigError(
            f"SN has {p.k} logits but {len(stats)} pool statistics"
        )
    n, c = x.shape[0], x.shape[1]
    target = (n, c) + (1,) * (x.ndim - 2)
    mean_ratios, var_ratios = sn_ratios(p)

    mixed_mean: Optional[Tensor] = None
    mixed_var: Optional[Tensor] = None
    for k, moments in enumerate(stats):
        mu, var = moments.aligned(x.ndim, c)
        mean_term = broadcast_to(mu, target) * mean_ratios[k]
        var_term = broadcast_to(var, target) * var_ratios[k]
        mixed_mean = (
            mean_term if mixed_mean is None else mixed_mean + mean_term
        )
        mixed_var = var_term if mixed_var is None else mixed_var + var_term

    assert mixed_mean is not None and mixed_var is not None
    x_hat = (x - mixed_mean) / sqrt(mixed_var + eps)
    return affine_transform(x_hat, p.gamma, p.beta)
