"""Trainable networks instantiated from an `ArchSpec`."""

from __future__ import annotations

__all__ = ["Network", "build_micro_cnn"]

from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import structlog

from exnorm.archspec import (
    MICRO_IMAGE_SIZE,
    ArchSpec,
    LayerKind,
    micro_cnn_spec,
)
from exnorm.layers import (
    Conv2d,
    ExemplarNorm,
    Linear,
    NormLayer,
    RatioTap,
    make_norm_layer,
)
from exnorm.tensor import Tensor, global_avg_pool, relu
from exnorm.types import ArchitectureError, ShapeMismatchError

Module = Union[Conv2d, Linear, NormLayer]

logger = structlog.get_logger(__name__)


class Network:
    """A layer DAG with parameters, run in declaration order.

    Parameters
    ----------
    arch: The architecture to instantiate.  Max pooling is not supported.
    norm: Norm type placed at every norm site (see `make_norm_layer`).
    seed: Seed of every initializer in the network.
    r, pi, groups, variant: Passed to `make_norm_layer`.
    dtype: Precision of parameters and activations.
    """

    def __init__(
        self,
        arch: ArchSpec,
        norm: str,
        seed: int = 0,
        r: int = 8,
        pi: int = 50,
        groups: int = 2,
        variant: Optional[str] = None,
        dtype: type = np.float32,
    ) -> None:
        self.arch = arch
        self.norm = norm
        self.seed = seed
        self.r = r
        self.pi = pi
        self.groups = groups
        self.variant = variant
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        self.modules: Dict[str, Module] = {}
        for i, spec in enumerate(arch.layers):
            if spec.kind is LayerKind.CONV:
                self.modules[spec.name] = Conv2d(
                    spec.c_in,
                    spec.c_out,
                    spec.kernel,
                    spec.name,
                    rng,
                    stride=spec.stride,
                    padding=spec.padding,
                    groups=spec.groups,
                    bias=spec.bias,
                    dtype=dtype,
                )
            elif spec.kind is LayerKind.NORM:
                self.modules[spec.name] = make_norm_layer(
                    norm,
                    spec.c_out,
                    name=spec.name,
                    seed=seed + i,
                    r=r,
                    pi=pi,
                    groups=groups,
                    variant=variant,
                    dtype=dtype,
                )
            elif spec.kind is LayerKind.FC:
                self.modules[spec.name] = Linear(
                    spec.c_in, spec.c_out, spec.name, rng, dtype=dtype
                )
            elif spec.kind is LayerKind.POOL and spec.kernel > 0:
                raise ArchitectureError(
                    f"{spec.name}: max pooling is count-only"
                )

    def forward(self, x: Tensor, training: bool = True) -> Tensor:
        """Logits for an N×C×H×W batch."""
        if x.ndim != 4 or x.shape[1] != self.arch.input_shape[0]:
            raise ShapeMismatchError(
                f"{self.arch.name} takes N×{self.arch.input_shape[0]}×H×W, "
                f"got {x.shape}"
            )
        values: Dict[str, Tensor] = {"input": x}
        out = x
        for i, spec in enumerate(self.arch.layers):
            sources = [values[name] for name in self.arch.inputs_of(i)]
            kind = spec.kind
            if kind is LayerKind.RESIDUAL_ADD:
                out = sources[0]
                for other in sources[1:]:
                    out = out + other
            elif kind is LayerKind.ACTIVATION:
                out = relu(sources[0])
            elif kind is LayerKind.POOL:
                out = global_avg_pool(sources[0])
            elif kind is LayerKind.NORM:
                module = self.modules[spec.name]
                assert isinstance(module, NormLayer)
                out = module.forward(sources[0], training)
            else:
                module = self.modules[spec.name]
                assert isinstance(module, (Conv2d, Linear))
                out = module.forward(sources[0])
            values[spec.name] = out
        return out

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for module in self.modules.values():
            params.extend(module.parameters())
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def norm_layers(self) -> List[NormLayer]:
        return [m for m in self.modules.values() if isinstance(m, NormLayer)]

    def en_layers(self) -> List[ExemplarNorm]:
        return [
            m for m in self.modules.values() if isinstance(m, ExemplarNorm)
        ]

    def set_ratio_tap(self, tap: Optional[RatioTap]) -> None:
        for layer in self.en_layers():
            layer.ratio_tap = tap

    def state(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer by name, in declaration order."""
        values = {str(p.name): p.data for p in self.parameters()}
        for layer in self.norm_layers():
            values.update(layer.buffers())
        return values

    def load_state(self, values: Dict[str, np.ndarray]) -> None:
        expected = set(self.state())
        if set(values) != expected:
            missing = sorted(expected - set(values))
            extra = sorted(set(values) - expected)
            raise ArchitectureError(
                f"State does not match the network: missing {missing}, "
                f"unexpected {extra}"
            )
        for p in self.parameters():
            stored = values[str(p.name)]
            if stored.shape != p.shape:
                raise ShapeMismatchError(
                    f"{p.name}: stored {stored.shape}, expected {p.shape}"
                )
            p.data = stored.astype(self.dtype).copy()
        for layer in self.norm_layers():
            layer.load_buffers(
                {k: v.astype(self.dtype) for k, v in values.items()}
            )

    def descriptor(self) -> Dict[str, Any]:
        """Everything needed to rebuild this network before loading state."""
        return {
            "arch": self.arch.to_dict(),
            "norm": self.norm,
            "seed": self.seed,
            "r": self.r,
            "pi": self.pi,
            "groups": self.groups,
            "variant": self.variant,
            "dtype": self.dtype.name,
        }

    @classmethod
    def from_descriptor(cls, data: Dict[str, Any]) -> Network:
        return cls(
            ArchSpec.from_dict(data["arch"]),
            data["norm"],
            seed=data["seed"],
            r=data["r"],
            pi=data["pi"],
            groups=data["groups"],
            variant=data["variant"],
            dtype=np.dtype(data["dtype"]).type,
        )


def build_micro_cnn(
    norm: str,
    classes: int = 3,
    widths: Sequence[int] = (16, 32, 64),
    image_size: int = MICRO_IMAGE_SIZE,
    seed: int = 0,
    r: int = 8,
    pi: int = 50,
    groups: int = 2,
    variant: Optional[str] = None,
    dtype: type = np.float32,
) -> Network:
    """The micro-CNN with ``norm`` at its three norm sites."""
    arch = micro_cnn_spec(classes, widths, image_size)
    network = Network(arch, norm, seed, r, pi, groups, variant, dtype)
    logger.debug(
        "Built micro-CNN",
        norm=norm,
        variant=variant,
        params=network.param_count(),
    )
    return network
