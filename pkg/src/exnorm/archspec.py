"""Architecture descriptions, parameter counts and FLOP counts.

An architecture is a DAG of `LayerSpec` records.  Each layer reads the
output of the layer before it unless it names its ``inputs``, which is how
residual shortcuts are written.

FLOPs follow one convention throughout, declared in every report: one
multiply-accumulate is one FLOP.
"""

from __future__ import annotations

__all__ = [
    "ArchSpec",
    "FLOP_CONVENTION",
    "MICRO_IMAGE_SIZE",
    "LayerKind",
    "LayerSpec",
    "architecture_report",
    "count_flops",
    "count_params",
    "micro_cnn_spec",
    "norm_param_count",
    "resnet50_spec",
]

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Dict, List, Optional, Sequence, Tuple

import structlog
from jsonschema import validate

from exnorm.exemplarnorm import ENConfig, en_param_count, psi
from exnorm.switchnorm import sn_param_count
from exnorm.types import ArchitectureError, NormTypeNotFoundError

FLOP_CONVENTION = (
    "1 multiply-accumulate = 1 FLOP; conv and fc count MACs; global "
    "average pooling counts C*H*W; activations, max pooling and residual "
    "additions count 0; each pool member of a norm layer costs 3*C*H*W, "
    "SN costs (K+2)*C*H*W; EN adds its ratio subnet"
)

NORM_KINDS = ("bn", "in", "ln", "gn", "sn", "en")

# Side of the square micro-CNN input, the CIFAR-10 image side.
MICRO_IMAGE_SIZE = 32

logger = structlog.get_logger(__name__)


class LayerKind(Enum):
    CONV = "conv"
    NORM = "norm"
    ACTIVATION = "activation"
    POOL = "pool"
    FC = "fc"
    RESIDUAL_ADD = "residual_add"


@dataclass(frozen=True)
class LayerSpec:
    """One node of an architecture DAG."""

    name: str
    kind: LayerKind
    c_in: int = 0
    c_out: int = 0
    kernel: int = 0
    """Kernel size; for pools, 0 means global average pooling."""

    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False
    inputs: Tuple[str, ...] = ()
    """Names of the layers read; empty means the previous layer."""

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        data["inputs"] = list(self.inputs)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> LayerSpec:
        values = dict(data)
        values["kind"] = LayerKind(values["kind"])
        values["inputs"] = tuple(values.get("inputs", ()))
        return cls(**values)


@dataclass(frozen=True)
class ArchSpec:
    """A named layer DAG with its declared input shape (C, H, W)."""

    name: str
    input_shape: Tuple[int, int, int]
    layers: Tuple[LayerSpec, ...]
    _index: Dict[str, int] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        for i, layer in enumerate(self.layers):
            if layer.name in self._index:
                raise ArchitectureError(f"Duplicate layer name {layer.name}")
            for source in layer.inputs:
                if source not in self._index:
                    raise ArchitectureError(
                        f"{layer.name} reads {source}, which is not an "
                        "earlier layer"
                    )
            self._index[layer.name] = i
        self.shapes(self.input_shape[1:])

    def inputs_of(self, position: int) -> Tuple[str, ...]:
        layer = self.layers[position]
        if layer.inputs:
            return layer.inputs
        if position == 0:
            return ("input",)
        return (self.layers[position - 1].name,)

    def norm_sites(self) -> List[LayerSpec]:
        return [
            layer for layer in self.layers if layer.kind is LayerKind.NORM
        ]

    def shapes(
        self, input_hw: Sequence[int]
    ) -> Dict[str, Tuple[int, int, int]]:
        """Output (C, H, W) of every layer for an input of ``input_hw``.

        FC outputs are recorded as (features, 1, 1).
        """
        out: Dict[str, Tuple[int, int, int]] = {
            "input": (self.input_shape[0], int(input_hw[0]), int(input_hw[1]))
        }
        for i, layer in enumerate(self.layers):
            sources = [out[name] for name in self.inputs_of(i)]
            c, h, w = sources[0]
            kind = layer.kind
            if kind is LayerKind.RESIDUAL_ADD:
                if len(set(sources)) != 1:
                    raise ArchitectureError(
                        f"{layer.name} adds mismatched shapes {sources}"
                    )
                out[layer.name] = sources[0]
                continue
            if len(sources) != 1:
                raise ArchitectureError(f"{layer.name} takes one input")
            if kind in (LayerKind.CONV, LayerKind.NORM, LayerKind.FC):
                if layer.c_in != c:
                    raise ArchitectureError(
                        f"{layer.name} expects {layer.c_in} channels, "
                        f"gets {c}"
                    )
            if kind is LayerKind.CONV or (
                kind is LayerKind.POOL and layer.kernel > 0
            ):
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ArchitectureError(
                        f"{layer.name} reduces the input to nothing"
                    )
                if kind is LayerKind.CONV:
                    c = layer.c_out
            elif kind is LayerKind.POOL:
                h = w = 1
            elif kind is LayerKind.FC:
                c, h, w = layer.c_out, 1, 1
            out[layer.name] = (c, h, w)
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ArchSpec:
        return cls(
            name=data["name"],
            input_shape=tuple(data["input_shape"]),  # type: ignore[arg-type]
            layers=tuple(LayerSpec.from_dict(d) for d in data["layers"]),
        )


def _conv(
    name: str,
    c_in: int,
    c_out: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    bias: bool = False,
    inputs: Tuple[str, ...] = (),
) -> LayerSpec:
    return LayerSpec(
        name,
        LayerKind.CONV,
        c_in,
        c_out,
        kernel,
        stride,
        padding,
        bias=bias,
        inputs=inputs,
    )


def _norm(name: str, channels: int) -> LayerSpec:
    return LayerSpec(name, LayerKind.NORM, channels, channels)


def _relu(name: str, inputs: Tuple[str, ...] = ()) -> LayerSpec:
    return LayerSpec(name, LayerKind.ACTIVATION, inputs=inputs)


def micro_cnn_spec(
    classes: int = 3,
    widths: Sequence[int] = (16, 32, 64),
    image_size: int = MICRO_IMAGE_SIZE,
) -> ArchSpec:
    """Three conv-norm blocks with one projection shortcut, pool and FC.

    The shortcut is a strided 1×1 convolution with bias from the second
    block's activation to the third block's norm output, so the model has
    exactly three norm sites.
    """
    c1, c2, c3 = widths
    layers = [
        _conv("conv1", 3, c1, 3, 1, 1),
        _norm("norm1", c1),
        _relu("relu1"),
        _conv("conv2", c1, c2, 3, 2, 1),
        _norm("norm2", c2),
        _relu("relu2"),
        _conv("conv3", c2, c3, 3, 2, 1),
        _norm("norm3", c3),
        _conv("shortcut", c2, c3, 1, 2, 0, bias=True, inputs=("relu2",)),
        LayerSpec("add", LayerKind.RESIDUAL_ADD, inputs=("norm3", "shortcut")),
        _relu("relu3"),
        LayerSpec("pool", LayerKind.POOL),
        LayerSpec("fc", LayerKind.FC, c3, classes, bias=True),
    ]
    return ArchSpec("micro", (3, image_size, image_size), tuple(layers))


def resnet50_spec() -> ArchSpec:
    """Bottleneck ResNet50 at 224×224, stride on each block's 3×3 conv."""
    layers: List[LayerSpec] = [
        _conv("conv1", 3, 64, 7, 2, 3),
        _norm("bn1", 64),
        _relu("relu"),
        LayerSpec("maxpool", LayerKind.POOL, kernel=3, stride=2, padding=1),
    ]
    c_in = 64
    previous = "maxpool"
    stages = [(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2)]
    stages.append((512, 2048, 3, 2))
    for s, (mid, c_out, blocks, stride) in enumerate(stages, start=1):
        for b in range(blocks):
            p = f"layer{s}.{b}"
            block_stride = stride if b == 0 else 1
            layers += [
                _conv(f"{p}.conv1", c_in, mid, 1, inputs=(previous,)),
                _norm(f"{p}.bn1", mid),
                _relu(f"{p}.relu1"),
                _conv(f"{p}.conv2", mid, mid, 3, block_stride, 1),
                _norm(f"{p}.bn2", mid),
                _relu(f"{p}.relu2"),
                _conv(f"{p}.conv3", mid, c_out, 1),
                _norm(f"{p}.bn3", c_out),
            ]
            shortcut = previous
            if b == 0:
                layers += [
                    _conv(
                        f"{p}.downsample.conv",
                        c_in,
                        c_out,
                        1,
                        block_stride,
                        inputs=(previous,),
                    ),
                    _norm(f"{p}.downsample.bn", c_out),
                ]
                shortcut = f"{p}.downsample.bn"
            layers += [
                LayerSpec(
                    f"{p}.add",
                    LayerKind.RESIDUAL_ADD,
                    inputs=(f"{p}.bn3", shortcut),
                ),
                _relu(f"{p}.relu3"),
            ]
            previous = f"{p}.relu3"
            c_in = c_out
    layers += [
        LayerSpec("avgpool", LayerKind.POOL),
        LayerSpec("fc", LayerKind.FC, 2048, 1000, bias=True),
    ]
    return ArchSpec("resnet50", (3, 224, 224), tuple(layers))


def norm_param_count(
    norm: str, channels: int, cfg: Optional[ENConfig] = None
) -> int:
    """Parameters of one norm site of the given type."""
    cfg = cfg or ENConfig()
    if norm in ("bn", "in", "ln", "gn"):
        return 2 * channels
    elif norm == "sn":
        return sn_param_count(channels, cfg.k)
    elif norm == "en":
        return en_param_count(channels, cfg).total
    else:
        raise NormTypeNotFoundError(norm)


def _layer_params(
    layer: LayerSpec, norm: str, cfg: Optional[ENConfig]
) -> int:
    if layer.kind is LayerKind.CONV:
        weights = (
            layer.c_out * (layer.c_in // layer.groups) * layer.kernel**2
        )
        return weights + (layer.c_out if layer.bias else 0)
    if layer.kind is LayerKind.FC:
        return layer.c_in * layer.c_out + (layer.c_out if layer.bias else 0)
    if layer.kind is LayerKind.NORM:
        return norm_param_count(norm, layer.c_out, cfg)
    return 0


def _norm_flops(
    norm: str, c: int, h: int, w: int, cfg: ENConfig
) -> int:
    chw = c * h * w
    if norm in ("bn", "in", "ln", "gn"):
        return 3 * chw
    if norm == "sn":
        return (cfg.k + 2) * chw
    if norm != "en":
        raise NormTypeNotFoundError(norm)

    k = cfg.k
    subnet = chw
    head_in, hidden = cfg.head_widths(c)
    if cfg.mlp_2layer:
        subnet += head_in * hidden + hidden * k
    else:
        subnet += k * c
        if cfg.uses_conv:
            subnet += k * c + k * k * (c // cfg.r)
        else:
            subnet += k * k * c
        subnet += head_in * hidden + hidden * k
    return 3 * k * chw + subnet


def _layer_flops(
    layer: LayerSpec,
    source: Tuple[int, int, int],
    output: Tuple[int, int, int],
    norm: str,
    cfg: ENConfig,
) -> int:
    c, h, w = output
    if layer.kind is LayerKind.CONV:
        return (
            layer.c_out
            * (layer.c_in // layer.groups)
            * layer.kernel**2
            * h
            * w
        )
    if layer.kind is LayerKind.FC:
        return layer.c_in * layer.c_out
    if layer.kind is LayerKind.NORM:
        return _norm_flops(norm, c, h, w, cfg)
    if layer.kind is LayerKind.POOL and layer.kernel == 0:
        return source[0] * source[1] * source[2]
    return 0


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: LayerKind
    channels: int
    value: int


def count_params(
    arch: ArchSpec, norm: str, cfg: Optional[ENConfig] = None
) -> Tuple[int, List[LayerCount]]:
    """Exact parameter count: the total and one row per layer.

    Convolutions carry a bias only where their spec says so.
    """
    rows = [
        LayerCount(
            layer.name,
            layer.kind,
            layer.c_out,
            _layer_params(layer, norm, cfg),
        )
        for layer in arch.layers
    ]
    return sum(row.value for row in rows), rows


def count_flops(
    arch: ArchSpec,
    norm: str,
    cfg: Optional[ENConfig] = None,
    input_hw: Optional[Sequence[int]] = None,
) -> Tuple[int, List[LayerCount]]:
    """FLOPs of one forward pass of a single image, per `FLOP_CONVENTION`."""
    cfg = cfg or ENConfig()
    hw = input_hw or arch.input_shape[1:]
    shapes = arch.shapes(hw)
    rows = []
    for i, layer in enumerate(arch.layers):
        source = shapes[arch.inputs_of(i)[0]]
        rows.append(
            LayerCount(
                layer.name,
                layer.kind,
                shapes[layer.name][0],
                _layer_flops(layer, source, shapes[layer.name], norm, cfg),
            )
        )
    return sum(row.value for row in rows), rows


def architecture_report(
    arch: ArchSpec,
    norm: str,
    cfg: Optional[ENConfig] = None,
    input_hw: Optional[Sequence[int]] = None,
) -> Dict[str, Any]:
    """Per-layer and total parameters and FLOPs as a JSON-ready dict.

    The report is validated against the packaged ``report.json`` schema.
    """
    if norm not in NORM_KINDS:
        raise NormTypeNotFoundError(norm)
    cfg = cfg or ENConfig()
    hw = list(input_hw or arch.input_shape[1:])
    total_params, params = count_params(arch, norm, cfg)
    total_flops, flops = count_flops(arch, norm, cfg, hw)

    layers = [
        {
            "name": p.name,
            "kind": p.kind.value,
            "C": p.channels,
            "params": p.value,
            "flops": f.value,
        }
        for p, f in zip(params, flops)
    ]
    report: Dict[str, Any] = {
        "arch": arch.name,
        "norm": norm,
        "input": hw,
        "convention": FLOP_CONVENTION,
        "norm_sites": len(arch.norm_sites()),
        "layers": layers,
        "totals": {"params": total_params, "flops": total_flops},
    }
    if norm == "en":
        report["en"] = {
            "pool": [str(k) for k in cfg.pool],
            "r": cfg.r,
            "pi": cfg.pi,
            "variant": cfg.variant,
            "psi": psi(cfg.k, cfg.pi),
            "note": (
                "psi counts both FC layers of the ratio head with biases; "
                "the grouped reduction shares C weights across the pool"
            ),
        }
    validate(
        instance=report,
        schema=json.loads(
            resources.read_text("exnorm.schemas", "report.json")
        ),
    )
    logger.info(
        "Counted architecture",
        arch=arch.name,
        norm=norm,
        params=total_params,
        flops=total_flops,
    )
    return report
