"""Central-difference verification of analytic gradients."""

__all__ = ["check_layer", "gradient_check", "gradient_check_report"]

from typing import Callable, Dict, Optional, Sequence

import numpy as np
import structlog

from exnorm.layers import make_norm_layer
from exnorm.tensor import Tensor, backward, tensor_sum
from exnorm.types import GradientCheckError, NonFiniteError

DEFAULT_EPS = 1e-5
DEFAULT_SAMPLES = 24

logger = structlog.get_logger(__name__)


def gradient_check_report(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = DEFAULT_EPS,
    samples: Optional[int] = DEFAULT_SAMPLES,
    seed: int = 0,
) -> Dict[str, float]:
    """Compare backpropagated gradients with central differences.

    Parameters
    ----------
    fn: Rebuilds the graph from the current parameter values and returns a
      scalar loss.  It is called once for the analytic pass and twice per
      checked coordinate.
    params: Named 64-bit leaves to check.  Their values are perturbed in
      place and restored.
    eps: Finite-difference step.
    samples: Coordinates checked per parameter, chosen at random.  ``None``
      checks every coordinate.
    seed: Seed of the coordinate sampler.

    Returns
    -------
    The largest relative error of each parameter, keyed by its name.  The
    relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise GradientCheckError(
                f"Gradient checks need 64-bit values, {p.name} is {p.dtype}"
            )
        if p.name is None:
            raise GradientCheckError("Checked parameters must be named")
        p.zero_grad()

    backward(fn(), params)
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if samples is None or p.size <= samples:
            chosen = np.arange(p.size)
        else:
            chosen = rng.choice(p.size, size=samples, replace=False)

        worst = 0.0
        for flat in chosen:
            index = np.unravel_index(int(flat), p.shape)
            original = p.data[index]
            p.data[index] = original + eps
            plus = fn().item()
            p.data[index] = original - eps
            minus = fn().item()
            p.data[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError(
                    f"Non-finite loss perturbing {p.name}{list(index)}"
                )
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[index])
            scale = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / scale)
        report[p.name] = worst
        logger.debug("Checked gradient", param=p.name, max_rel_error=worst)
    return report


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = DEFAULT_EPS,
    samples: Optional[int] = DEFAULT_SAMPLES,
    seed: int = 0,
) -> float:
    """Largest relative error over every checked coordinate."""
    report = gradient_check_report(fn, params, eps, samples, seed)
    return max(report.values(), default=0.0)


def check_layer(
    layer_name: str,
    shape: Sequence[int],
    seed: int = 0,
    r: int = 2,
    pi: int = 50,
    groups: int = 2,
    eps: float = DEFAULT_EPS,
) -> Dict[str, float]:
    """Gradient-check one normalization layer at 64-bit.

    The layer's parameters are moved off their initial values so that no
    gradient is degenerate (EN's zero-initialized head would otherwise hide
    every ratio gradient), and the loss is a randomly weighted sum of the
    layer output.  The input is checked together with the parameters.
    """
    if len(shape) != 4:
        raise GradientCheckError(f"Shape must be N,C,H,W, got {shape}")
    rng = np.random.default_rng(seed)
    layer = make_norm_layer(
        layer_name,
        int(shape[1]),
        name=layer_name,
        seed=seed,
        r=r,
        pi=pi,
        groups=groups,
        dtype=np.float64,
    )
    for p in layer.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)

    x = Tensor(
        rng.standard_normal(tuple(shape)), requires_grad=True, name="input"
    )
    weights = Tensor(rng.standard_normal(tuple(shape)))

    def loss() -> Tensor:
        return tensor_sum(layer.forward(x, training=True) * weights)

    report = gradient_check_report(
        loss, [*layer.parameters(), x], eps=eps, seed=seed
    )
    logger.info(
        "Gradient check",
        layer=layer_name,
        shape=list(shape),
        max_rel_error=max(report.values()),
    )
    return report
