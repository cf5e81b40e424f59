"""Statistics and standardization for the individual normalizers.

Each normalizer removes a mean and divides by a deviation computed over its
own set of axes of an N×C×H×W input:

- BN: over (N, H, W), one value per channel
- IN: over (H, W), one value per sample and channel
- LN: over (C, H, W), one value per sample
- GN(g): over (C/g, H, W), one value per sample and channel group
"""

from __future__ import annotations

__all__ = [
    "BN",
    "GN",
    "IN",
    "LN",
    "MomentPair",
    "NormalizerKind",
    "RunningStats",
    "StatsBundle",
    "affine_transform",
    "compute_moments",
    "compute_stats",
    "standardize",
    "update_running",
]

import re
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
import structlog

from exnorm.tensor import Tensor, mean, repeat, reshape, sqrt
from exnorm.types import NormalizerConfigError, ShapeMismatchError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

logger = structlog.get_logger(__name__)

_KIND_RE = re.compile(r"^(bn|in|ln|gn)(?:[:(]?(\d+)\)?)?$", re.IGNORECASE)


@dataclass(frozen=True)
class NormalizerKind:
    """One member of a normalizer pool."""

    tag: str
    """One of "BN", "IN", "LN" or "GN"."""

    groups: int = 0
    """Group count for GN, 0 for every other kind."""

    def __post_init__(self) -> None:
        if self.tag not in ("BN", "IN", "LN", "GN"):
            raise NormalizerConfigError(f"Unknown normalizer {self.tag}")
        if self.tag == "GN" and self.groups < 1:
            raise NormalizerConfigError("GN needs a positive group count")
        if self.tag != "GN" and self.groups != 0:
            raise NormalizerConfigError(f"{self.tag} takes no group count")

    def __str__(self) -> str:
        return f"GN({self.groups})" if self.tag == "GN" else self.tag

    @classmethod
    def parse(cls, text: str) -> NormalizerKind:
        """Parse "bn", "in", "ln", "gn4", "gn:4" or "GN(4)"."""
        match = _KIND_RE.match(text.strip())
        if not match:
            raise NormalizerConfigError(f"Cannot parse normalizer {text!r}")
        tag = match.group(1).upper()
        if tag == "GN":
            return cls(tag, int(match.group(2) or 1))
        if match.group(2):
            raise NormalizerConfigError(f"{tag} takes no group count")
        return cls(tag)

    @property
    def is_batch(self) -> bool:
        return self.tag == "BN"

    def reduced_axes(self) -> Tuple[int, ...]:
        """Axes of the N×C×H×W input each statistic is reduced over.

        GN reduces over a grouped view, so its channel axis is reduced only
        within a group.
        """
        return {
            "BN": (0, 2, 3),
            "IN": (2, 3),
            "LN": (1, 2, 3),
            "GN": (1, 2, 3),
        }[self.tag]

    def moment_shape(self, n: int, c: int) -> Tuple[int, ...]:
        """Compact shape of this kind's mean and variance."""
        return {
            "BN": (c,),
            "IN": (n, c),
            "LN": (n,),
            "GN": (n, self.groups),
        }[self.tag]


BN = NormalizerKind("BN")
IN = NormalizerKind("IN")
LN = NormalizerKind("LN")


def GN(groups: int) -> NormalizerKind:
    return NormalizerKind("GN", groups)


@dataclass(frozen=True)
class MomentPair:
    """Mean and variance computed by one normalizer.

    Both tensors have the kind's compact shape (BN C, IN N×C, LN N, GN N×g).
    The variance is kept rather than the deviation because every consumer
    uses the squared deviation.
    """

    mean: Tensor
    var: Tensor
    kind: NormalizerKind
    axes: Tuple[int, ...]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var.data)

    def aligned(self, ndim: int, channels: int) -> Tuple[Tensor, Tensor]:
        """Mean and variance reshaped to broadcast against a rank-``ndim``
        input whose channel axis is axis 1.
        """
        return (
            self._align(self.mean, ndim, channels),
            self._align(self.var, ndim, channels),
        )

    def _align(self, value: Tensor, ndim: int, channels: int) -> Tensor:
        tail = (1,) * (ndim - 2)
        tag = self.kind.tag
        if tag == "BN":
            if value.shape != (channels,):
                raise ShapeMismatchError(
                    f"BN moments {value.shape} do not match {channels} "
                    "channels"
                )
            return reshape(value, (1, channels) + tail)
        if tag == "IN":
            if value.shape[1] != channels:
                raise ShapeMismatchError(
                    f"IN moments {value.shape} do not match {channels} "
                    "channels"
                )
            return reshape(value, value.shape + tail)
        if tag == "LN":
            return reshape(value, (value.shape[0], 1) + tail)
        per_channel = repeat(value, channels // self.kind.groups, axis=1)
        return reshape(per_channel, per_channel.shape + tail)


@dataclass(frozen=True)
class StatsBundle:
    """The statistics of every member of a normalizer pool, in pool order."""

    moments: Tuple[MomentPair, ...]

    def __post_init__(self) -> None:
        kinds = [m.kind for m in self.moments]
        if len(set(kinds)) != len(kinds):
            raise NormalizerConfigError(
                f"Pool members must be distinct: {[str(k) for k in kinds]}"
            )

    def __len__(self) -> int:
        return len(self.moments)

    def __iter__(self) -> Iterator[MomentPair]:
        return iter(self.moments)

    def __getitem__(self, index: int) -> MomentPair:
        return self.moments[index]

    @property
    def kinds(self) -> Tuple[NormalizerKind, ...]:
        return tuple(m.kind for m in self.moments)

    def for_kind(self, kind: NormalizerKind) -> MomentPair:
        for m in self.moments:
            if m.kind == kind:
                return m
        raise NormalizerConfigError(f"No {kind} statistics in bundle")


@dataclass(frozen=True)
class RunningStats:
    """Exponential moving averages of BN's per-channel moments."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise NormalizerConfigError(
                f"Momentum must be in (0, 1), got {self.momentum}"
            )

    @classmethod
    def initial(
        cls,
        channels: int,
        momentum: float = DEFAULT_MOMENTUM,
        dtype: type = np.float64,
    ) -> RunningStats:
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )

    def moments(self) -> MomentPair:
        """These statistics as a constant BN moment pair."""
        return MomentPair(
            mean=Tensor(self.mean),
            var=Tensor(self.var),
            kind=BN,
            axes=BN.reduced_axes(),
        )


def compute_moments(x: Tensor, kind: NormalizerKind) -> MomentPair:
    """Population mean and variance of ``x`` for one normalizer.

    Two passes: the mean first, then the mean squared deviation from it.
    Both reductions accumulate in 64 bits.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"Moments need N×C×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    if kind.tag == "GN":
        if c % kind.groups:
            raise NormalizerConfigError(
                f"GN with {kind.groups} groups cannot split {c} channels"
            )
        view = reshape(x, (n, kind.groups, (c // kind.groups) * h * w))
        mu = mean(view, 2, keepdims=True)
        diff = view - mu
        var = mean(diff * diff, 2)
        return MomentPair(
            mean=reshape(mu, (n, kind.groups)),
            var=var,
            kind=kind,
            axes=kind.reduced_axes(),
        )

    axes = kind.reduced_axes()
    mu = mean(x, axes, keepdims=True)
    diff = x - mu
    var = mean(diff * diff, axes)
    return MomentPair(
        mean=reshape(mu, kind.moment_shape(n, c)),
        var=var,
        kind=kind,
        axes=axes,
    )


def compute_stats(
    x: Tensor,
    pool: Sequence[NormalizerKind],
    running: Optional[RunningStats] = None,
) -> StatsBundle:
    """Statistics for every pool member.

    When ``running`` is given (inference), the BN member uses it instead of
    the batch statistics.
    """
    moments = []
    for kind in pool:
        if kind.is_batch and running is not None:
            moments.append(running.moments())
        else:
            moments.append(compute_moments(x, kind))
    return StatsBundle(tuple(moments))


def standardize(x: Tensor, m: MomentPair, eps: float = DEFAULT_EPS) -> Tensor:
    """Pre-affine output ``(x - mean) / sqrt(var + eps)``.

    ``x`` may be the full N×C×H×W input or an N×C pooled view of it.
    """
    if eps <= 0:
        raise NormalizerConfigError(f"eps must be positive, got {eps}")
    mu, var = m.aligned(x.ndim, x.shape[1])
    return (x - mu) / sqrt(var + eps)


def affine_transform(x_hat: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel ``gamma * x_hat + beta``."""
    channels = x_hat.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            f"Affine parameters {gamma.shape}, {beta.shape} do not match "
            f"{channels} channels"
        )
    return x_hat * gamma + beta


def update_running(rs: RunningStats, batch: MomentPair) -> RunningStats:
    """One EMA step: ``running <- (1 - m) * running + m * batch``."""
    if not batch.kind.is_batch:
        raise NormalizerConfigError(
            f"Running statistics track BN, got {batch.kind}"
        )
    m = rs.momentum
    return RunningStats(
        mean=(1.0 - m) * rs.mean + m * batch.mean.data,
        var=(1.0 - m) * rs.var + m * batch.var.data,
        momentum=m,
    )
