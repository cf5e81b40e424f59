"""Model layers: convolution, FC and the pluggable normalization layers."""

from __future__ import annotations

__all__ = [
    "Conv2d",
    "ExemplarNorm",
    "Linear",
    "NormLayer",
    "RatioTap",
    "SingleNorm",
    "SwitchNorm",
    "make_norm_layer",
]

from abc import ABC, abstractmethod
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import structlog

from exnorm.exemplarnorm import DEFAULT_POOL, ENConfig, en_forward, en_init
from exnorm.normalizers import (
    BN,
    DEFAULT_EPS,
    DEFAULT_MOMENTUM,
    NormalizerKind,
    RunningStats,
    StatsBundle,
    affine_transform,
    compute_moments,
    compute_stats,
    standardize,
    update_running,
)
from exnorm.switchnorm import sn_forward, sn_init
from exnorm.tensor import Tensor, conv2d
from exnorm.types import NormalizerConfigError, NormTypeNotFoundError

RatioTap = Callable[[str, np.ndarray], None]
"""Receives a layer name and a copy of the N×K ratios it just used."""

NORM_TYPES = ("bn", "in", "ln", "gn", "sn", "en")

logger = structlog.get_logger(__name__)


class NormLayer(ABC):
    """A normalization layer that can be placed at any norm site."""

    def __init__(self, name: str, channels: int) -> None:
        self.name = name
        self.channels = channels
        self.running: Optional[RunningStats] = None

    @abstractmethod
    def forward(self, x: Tensor, training: bool) -> Tensor:
        """Normalize ``x``.

        Parameters
        ----------
        x: N×C×H×W input.
        training: Use batch statistics for BN and update the running
          statistics.  Otherwise BN uses the running statistics.
        """

    @abstractmethod
    def parameters(self) -> List[Tensor]:
        """Learnable tensors in declaration order."""

    @property
    def pool(self) -> Sequence[NormalizerKind]:
        return ()

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-learnable state saved with checkpoints."""
        if self.running is None:
            return {}
        return {
            f"{self.name}.running_mean": self.running.mean,
            f"{self.name}.running_var": self.running.var,
        }

    def load_buffers(self, values: Dict[str, np.ndarray]) -> None:
        if self.running is None:
            return
        self.running = RunningStats(
            mean=values[f"{self.name}.running_mean"],
            var=values[f"{self.name}.running_var"],
            momentum=self.running.momentum,
        )

    def _batch_stats(self, x: Tensor, training: bool) -> StatsBundle:
        stats = compute_stats(
            x, self.pool, running=None if training else self.running
        )
        if training and self.running is not None:
            self.running = update_running(self.running, stats.for_kind(BN))
        return stats

    def _running_for(
        self, momentum: float, dtype: type
    ) -> Optional[RunningStats]:
        if any(kind.is_batch for kind in self.pool):
            return RunningStats.initial(self.channels, momentum, dtype)
        return None


class SingleNorm(NormLayer):
    """One normalizer with a per-channel scale and shift."""

    def __init__(
        self,
        kind: NormalizerKind,
        channels: int,
        name: str,
        eps: float = DEFAULT_EPS,
        momentum: float = DEFAULT_MOMENTUM,
        dtype: type = np.float32,
    ) -> None:
        super().__init__(name, channels)
        if kind.tag == "GN" and channels % kind.groups:
            raise NormalizerConfigError(
                f"GN with {kind.groups} groups cannot split "
                f"{channels} channels"
            )
        self.kind = kind
        self.eps = eps
        self.gamma = Tensor(
            np.ones(channels, dtype=dtype),
            requires_grad=True,
            name=f"{name}.gamma",
        )
        self.beta = Tensor(
            np.zeros(channels, dtype=dtype),
            requires_grad=True,
            name=f"{name}.beta",
        )
        self.running = self._running_for(momentum, dtype)

    @property
    def pool(self) -> Sequence[NormalizerKind]:
        return (self.kind,)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if self.running is not None and not training:
            moments = self.running.moments()
        else:
            moments = compute_moments(x, self.kind)
            if self.running is not None:
                self.running = update_running(self.running, moments)
        x_hat = standardize(x, moments, self.eps)
        return affine_transform(x_hat, self.gamma, self.beta)

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]


class SwitchNorm(NormLayer):
    """Dataset-global mixture of the pool's statistics."""

    def __init__(
        self,
        channels: int,
        name: str,
        pool: Sequence[NormalizerKind] = DEFAULT_POOL,
        tied: bool = False,
        eps: float = DEFAULT_EPS,
        momentum: float = DEFAULT_MOMENTUM,
        dtype: type = np.float32,
    ) -> None:
        super().__init__(name, channels)
        self._pool = tuple(pool)
        self.eps = eps
        self.params = sn_init(
            channels, len(self._pool), tied, dtype, prefix=f"{name}."
        )
        self.running = self._running_for(momentum, dtype)

    @property
    def pool(self) -> Sequence[NormalizerKind]:
        return self._pool

    def forward(self, x: Tensor, training: bool) -> Tensor:
        stats = self._batch_stats(x, training)
        return sn_forward(x, self.params, stats, self.eps)

    def parameters(self) -> List[Tensor]:
        return self.params.parameters()


class ExemplarNorm(NormLayer):
    """Per-sample mixture of the pool's statistics.

    ``ratio_tap``, when set, is called after every forward pass with the
    layer name and a copy of the ratios used.  It cannot change the output.
    """

    def __init__(
        self,
        channels: int,
        name: str,
        cfg: Optional[ENConfig] = None,
        seed: int = 0,
        momentum: float = DEFAULT_MOMENTUM,
        dtype: type = np.float32,
    ) -> None:
        super().__init__(name, channels)
        self.cfg = cfg or ENConfig()
        self.params = en_init(
            channels, self.cfg, seed, dtype, prefix=f"{name}."
        )
        self.running = self._running_for(momentum, dtype)
        self.ratio_tap: Optional[RatioTap] = None

    @property
    def pool(self) -> Sequence[NormalizerKind]:
        return self.cfg.pool

    def forward(self, x: Tensor, training: bool) -> Tensor:
        stats = self._batch_stats(x, training)
        out, ratios = en_forward(x, self.params, stats, self.cfg)
        if self.ratio_tap is not None:
            self.ratio_tap(self.name, ratios.array.copy())
        return out

    def parameters(self) -> List[Tensor]:
        return self.params.parameters()


class Conv2d:
    """Grouped 2-D convolution with an optional per-channel bias."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        name: str,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = False,
        dtype: type = np.float32,
    ) -> None:
        self.name = name
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (c_in // groups) * kernel * kernel
        # He normal
        self.weight = Tensor(
            rng.normal(
                0.0,
                np.sqrt(2.0 / fan_in),
                size=(c_out, c_in // groups, kernel, kernel),
            ).astype(dtype),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = (
            Tensor(
                np.zeros(c_out, dtype=dtype),
                requires_grad=True,
                name=f"{name}.bias",
            )
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.padding, self.groups)
        return out if self.bias is None else out + self.bias

    def parameters(self) -> List[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class Linear:
    """Fully connected layer on N×F inputs."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        name: str,
        rng: np.random.Generator,
        dtype: type = np.float32,
    ) -> None:
        self.name = name
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(c_in, c_out)).astype(dtype),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = Tensor(
            rng.uniform(-bound, bound, size=c_out).astype(dtype),
            requires_grad=True,
            name=f"{name}.bias",
        )

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


def make_norm_layer(
    norm: str,
    channels: int,
    *,
    name: str,
    seed: int = 0,
    r: int = 8,
    pi: int = 50,
    groups: int = 2,
    variant: Optional[str] = None,
    tied: bool = False,
    eps: float = DEFAULT_EPS,
    momentum: float = DEFAULT_MOMENTUM,
    dtype: type = np.float32,
) -> NormLayer:
    """Create a norm layer by type name.

    Parameters
    ----------
    norm: One of bn, in, ln, gn, sn or en.  ``en-a`` to ``en-d`` are
      shorthand for ``en`` with that variant.
    groups: Group count of GN.
    variant: EN ablation letter, or ``None``.
    """
    norm = norm.lower()
    if norm.startswith("en-"):
        norm, variant = "en", norm[3:]

    if norm in ("bn", "in", "ln"):
        kind = NormalizerKind(norm.upper())
        return SingleNorm(kind, channels, name, eps, momentum, dtype)
    elif norm == "gn":
        kind = NormalizerKind("GN", groups)
        return SingleNorm(kind, channels, name, eps, momentum, dtype)
    elif norm == "sn":
        return SwitchNorm(
            channels, name, tied=tied, eps=eps, momentum=momentum, dtype=dtype
        )
    elif norm == "en":
        cfg = ENConfig.with_variant(variant, r=r, pi=pi, eps=eps)
        return ExemplarNorm(channels, name, cfg, seed, momentum, dtype)
    else:
        raise NormTypeNotFoundError(norm)
