"""Exemplar normalization: per-sample mixtures of pool statistics.

A small subnet looks at each sample, compares how the pool members would
standardize it, and outputs that sample's important ratios.  The layer
output is the ratio-weighted sum of the standardized maps, each with its own
scale and shift.

Four ablations of the subnet are supported through `ENConfig` flags:

a. ``mlp_2layer``: pooled features feed a two-layer MLP directly.
b. ``no_conv``: the grouped reduction is skipped and the pre-standardized
   features are correlated directly.
c. ``relu_head``: ReLU instead of tanh after the first FC layer.
d. ``single_affine``: one shared scale and shift after the weighted sum.
"""

from __future__ import annotations

__all__ = [
    "DEFAULT_POOL",
    "ENConfig",
    "ENParamCount",
    "ENParams",
    "RatioMatrix",
    "en_forward",
    "en_init",
    "en_param_count",
    "en_variant_forward",
    "psi",
    "ratio_subnet",
]

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from exnorm.normalizers import (
    BN,
    DEFAULT_EPS,
    IN,
    LN,
    NormalizerKind,
    StatsBundle,
    affine_transform,
    standardize,
)
from exnorm.tensor import (
    Tensor,
    conv2d,
    global_avg_pool,
    pairwise_correlation,
    relu,
    reshape,
    softmax_rows,
    stack,
    tanh,
)
from exnorm.types import ENConfigError, NonFiniteError, RatioError

DEFAULT_POOL = (IN, LN, BN)
VARIANT_FLAGS = {
    "a": "mlp_2layer",
    "b": "no_conv",
    "c": "relu_head",
    "d": "single_affine",
}
SIMPLEX_TOLERANCE = 1e-6

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class ENConfig:
    """Shape of an exemplar normalization layer and its ratio subnet."""

    pool: Tuple[NormalizerKind, ...] = DEFAULT_POOL
    """Normalizers mixed by the layer, in ratio order."""

    r: int = 8
    """Reduction rate of the grouped convolution (C to C/r)."""

    pi: int = 50
    """Expansion factor of the first FC layer (K² to πK)."""

    eps: float = DEFAULT_EPS

    mlp_2layer: bool = False
    no_conv: bool = False
    relu_head: bool = False
    single_affine: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "pool", tuple(self.pool))
        if len(self.pool) < 2:
            raise ENConfigError(
                f"The pool needs at least two normalizers, got {self.k}"
            )
        if len(set(self.pool)) != len(self.pool):
            raise ENConfigError(
                f"Pool members must be distinct: {[str(k) for k in self.pool]}"
            )
        if self.r < 1 or self.pi < 1:
            raise ENConfigError(
                f"r and pi must be positive, got r={self.r} pi={self.pi}"
            )
        if self.eps <= 0:
            raise ENConfigError(f"eps must be positive, got {self.eps}")
        active = [
            v for v, flag in VARIANT_FLAGS.items() if getattr(self, flag)
        ]
        if len(active) > 1:
            raise ENConfigError(f"At most one variant may be set: {active}")

    @classmethod
    def with_variant(
        cls, variant: Optional[str], **kwargs: object
    ) -> ENConfig:
        """Build a config from a variant letter, ``None`` or "none"."""
        flags: Dict[str, object] = dict(kwargs)
        if variant not in (None, "none"):
            try:
                flags[VARIANT_FLAGS[str(variant)]] = True
            except KeyError:
                raise ENConfigError(f"Unknown EN variant {variant!r}")
        return cls(**flags)  # type: ignore[arg-type]

    @property
    def k(self) -> int:
        return len(self.pool)

    @property
    def variant(self) -> str:
        """The active ablation letter, or "none"."""
        for letter, flag in VARIANT_FLAGS.items():
            if getattr(self, flag):
                return letter
        return "none"

    @property
    def uses_conv(self) -> bool:
        return not (self.mlp_2layer or self.no_conv)

    def check_channels(self, channels: int) -> None:
        if self.uses_conv and channels % self.r:
            raise ENConfigError(
                f"Channel count {channels} is not divisible by r={self.r}"
            )

    def head_widths(self, channels: int) -> Tuple[int, int]:
        """Input and hidden width of the ratio head."""
        if self.mlp_2layer:
            return channels, max(1, channels // 32)
        return self.k * self.k, self.pi * self.k


@dataclass
class ENParams:
    """Learnable parameters of one exemplar normalization layer."""

    gammas: List[Tensor]
    betas: List[Tensor]
    conv_w: Optional[Tensor]
    """Grouped reduction weights, C/r × r × 1 × 1; shared by every slice."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def parameters(self) -> List[Tensor]:
        params = [*self.gammas, *self.betas]
        if self.conv_w is not None:
            params.append(self.conv_w)
        params.extend([self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b])
        return params

    def records(self) -> Dict[str, Tensor]:
        return {str(p.name): p for p in self.parameters()}


@dataclass(frozen=True)
class RatioMatrix:
    """Per-sample important ratios, one N×K row per sample."""

    values: Tensor

    @property
    def array(self) -> np.ndarray:
        return self.values.data

    def validate(self, k: Optional[int] = None) -> None:
        """Check that every row lies on the closed K-simplex."""
        data = self.values.data
        if data.ndim != 2 or (k is not None and data.shape[1] != k):
            raise RatioError(f"Ratios must be N×{k}, got {data.shape}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise RatioError("Ratios must be finite and non-negative")
        sums = data.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > SIMPLEX_TOLERANCE):
            raise RatioError(f"Ratio rows must sum to 1, got {sums}")


@dataclass(frozen=True)
class ENParamCount:
    affines: int
    conv: int
    head: int
    total: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "total", self.affines + self.conv + self.head
        )

    def as_dict(self) -> Dict[str, int]:
        return {
            "affines": self.affines,
            "conv": self.conv,
            "head": self.head,
            "total": self.total,
        }


def psi(k: int, pi: int) -> int:
    """Parameters of the two-layer ratio head, biases included."""
    hidden = pi * k
    return k * k * hidden + hidden + hidden * k + k


def en_param_count(channels: int, cfg: ENConfig) -> ENParamCount:
    """Closed-form parameter count of one layer, for any variant."""
    n_affine = 1 if cfg.single_affine else cfg.k
    head_in, hidden = cfg.head_widths(channels)
    if cfg.mlp_2layer:
        head = head_in * hidden + hidden + hidden * cfg.k + cfg.k
    else:
        head = psi(cfg.k, cfg.pi)
    return ENParamCount(
        affines=2 * n_affine * channels,
        conv=channels if cfg.uses_conv else 0,
        head=head,
    )


def en_init(
    channels: int,
    cfg: ENConfig,
    seed: int = 0,
    dtype: type = np.float32,
    prefix: str = "",
) -> ENParams:
    """Initial parameters: unit scales, zero shifts and a zero final FC.

    The zero final FC makes the first forward passes mix the pool uniformly.
    The grouped reduction and the first FC are uniform in ±1/sqrt(fan-in).
    """
    cfg.check_channels(channels)
    rng = np.random.default_rng(seed)

    def param(name: str, values: np.ndarray) -> Tensor:
        return Tensor(
            values.astype(dtype), requires_grad=True, name=prefix + name
        )

    def uniform(fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    n_affine = 1 if cfg.single_affine else cfg.k
    gammas = [
        param(f"gamma.{i}", np.ones(channels)) for i in range(n_affine)
    ]
    betas = [param(f"beta.{i}", np.zeros(channels)) for i in range(n_affine)]

    conv_w = None
    if cfg.uses_conv:
        conv_w = param(
            "conv_w", uniform(cfg.r, (channels // cfg.r, cfg.r, 1, 1))
        )

    head_in, hidden = cfg.head_widths(channels)
    return ENParams(
        gammas=gammas,
        betas=betas,
        conv_w=conv_w,
        fc1_w=param("fc1_w", uniform(head_in, (head_in, hidden))),
        fc1_b=param("fc1_b", uniform(head_in, (hidden,))),
        fc2_w=param("fc2_w", np.zeros((hidden, cfg.k))),
        fc2_b=param("fc2_b", np.zeros(cfg.k)),
    )


def _check_pool(stats: StatsBundle, cfg: ENConfig) -> None:
    if stats.kinds != cfg.pool:
        raise ENConfigError(
            f"Statistics for {[str(k) for k in stats.kinds]} do not match "
            f"the pool {[str(k) for k in cfg.pool]}"
        )


def ratio_subnet(
    x: Tensor, stats: StatsBundle, p: ENParams, cfg: ENConfig
) -> RatioMatrix:
    """Compute each sample's important ratios from its pooled features.

    1. Average-pool x to N×C and standardize the pooled features with every
       pool member's moments, giving N×K×C.
    2. Reduce each normalizer slice from C to C/r with the shared grouped
       convolution (C/r groups of r channels).
    3. Correlate the K reduced slices of each sample (K×K, flattened).
    4. FC to πK, tanh, FC to K logits, row softmax.
    """
    _check_pool(stats, cfg)
    n, c = x.shape[0], x.shape[1]
    pooled = global_avg_pool(x)

    if cfg.mlp_2layer:
        hidden = tanh(pooled @ p.fc1_w + p.fc1_b)
    else:
        x_hat = stack(
            [standardize(pooled, m, cfg.eps) for m in stats], axis=1
        )
        if cfg.no_conv:
            z = x_hat
        else:
            assert p.conv_w is not None
            slices = reshape(x_hat, (n * cfg.k, c, 1, 1))
            reduced = conv2d(slices, p.conv_w, groups=c // cfg.r)
            z = reshape(reduced, (n, cfg.k, c // cfg.r))
        v = pairwise_correlation(z)
        activation = relu if cfg.relu_head else tanh
        hidden = activation(v @ p.fc1_w + p.fc1_b)

    logits = hidden @ p.fc2_w + p.fc2_b
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("Ratio subnet produced non-finite logits")
    return RatioMatrix(softmax_rows(logits))


def _as_ratios(value: Union[RatioMatrix, np.ndarray, Tensor]) -> RatioMatrix:
    if isinstance(value, RatioMatrix):
        return value
    if isinstance(value, Tensor):
        return RatioMatrix(value)
    return RatioMatrix(Tensor(np.asarray(value)))


def en_forward(
    x: Tensor,
    p: ENParams,
    stats: StatsBundle,
    cfg: ENConfig,
    ratios: Optional[Union[RatioMatrix, np.ndarray, Tensor]] = None,
) -> Tuple[Tensor, RatioMatrix]:
    """Mix the standardized maps of every pool member per sample.

    ``out_n = sum_k gamma_k * (λ_nk * standardize(x_n, Ω_k)) + beta_k``.
    Every ``beta_k`` is added whatever the ratios are.  With
    ``single_affine`` one shared scale and shift is applied after the sum.

    Parameters
    ----------
    ratios: Optional N×K ratios used instead of the subnet's.  Rows must lie
      on the closed simplex.

    Returns
    -------
    The normalized tensor and the ratios that were used.
    """
    _check_pool(stats, cfg)
    n_affine = 1 if cfg.single_affine else cfg.k
    if len(p.gammas) != n_affine or len(p.betas) != n_affine:
        raise ENConfigError(
            f"Expected {n_affine} affine pairs, got "
            f"{len(p.gammas)} scales and {len(p.betas)} shifts"
        )

    if ratios is None:
        lam = ratio_subnet(x, stats, p, cfg)
    else:
        lam = _as_ratios(ratios)
        lam.validate(cfg.k)
        if lam.values.shape[0] != x.shape[0]:
            raise RatioError(
                f"{lam.values.shape[0]} ratio rows for {x.shape[0]} samples"
            )

    n = x.shape[0]
    weight_shape = (n,) + (1,) * (x.ndim - 1)
    out: Optional[Tensor] = None
    for k, moments in enumerate(stats):
        weight = reshape(lam.values[:, k], weight_shape)
        term = standardize(x, moments, cfg.eps) * weight
        if not cfg.single_affine:
            term = affine_transform(term, p.gammas[k], p.betas[k])
        out = term if out is None else out + term

    assert out is not None
    if cfg.single_affine:
        out = affine_transform(out, p.gammas[0], p.betas[0])
    return out, lam


def en_variant_forward(
    x: Tensor, p: ENParams, stats: StatsBundle, cfg: ENConfig
) -> Tensor:
    """Forward pass of an ablated layer; exactly one variant must be set."""
    if cfg.variant == "none":
        raise ENConfigError("en_variant_forward needs one variant flag set")
    out, _ = en_forward(x, p, stats, cfg)
    return out
