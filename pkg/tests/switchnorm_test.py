"""Tests for switchable normalization."""

import math

import numpy as np
import pytest

from exnorm.normalizers import (
    BN,
    IN,
    LN,
    affine_transform,
    compute_moments,
    compute_stats,
    standardize,
)
from exnorm.switchnorm import sn_forward, sn_init, sn_param_count, sn_ratios
from exnorm.tensor import Tensor
from exnorm.types import NormalizerConfigError

from .oracles import moments_loop

POOL = (IN, LN, BN)


def test_init_and_counts() -> None:
    p = sn_init(8, 3, dtype=np.float64, prefix="sn.")
    assert [t.name for t in p.parameters()] == [
        "sn.gamma",
        "sn.beta",
        "sn.mean_logits",
        "sn.var_logits",
    ]
    assert sum(t.size for t in p.parameters()) == sn_param_count(8, 3)
    assert sn_param_count(8, 3) == 22
    tied = sn_init(8, 3, tied=True)
    assert tied.tied
    assert sum(t.size for t in tied.parameters()) == sn_param_count(8, 3, True)

    with pytest.raises(NormalizerConfigError):
        sn_init(8, 1)


def test_ratios() -> None:
    p = sn_init(4, 3, dtype=np.float64)
    mean_ratios, var_ratios = sn_ratios(p)
    assert np.allclose(mean_ratios.data, 1.0 / 3.0)
    assert np.allclose(var_ratios.data, 1.0 / 3.0)

    p.mean_logits.data[:] = [math.log(2.0), 0.0, 0.0]
    mean_ratios, _ = sn_ratios(p)
    assert np.allclose(mean_ratios.data, [0.5, 0.25, 0.25], atol=1e-15)

    tied = sn_init(4, 3, tied=True, dtype=np.float64)
    tied.mean_logits.data[:] = [0.3, -1.0, 2.0]
    a, b = sn_ratios(tied)
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("k", range(3))
def test_one_hot_logits_select_one_normalizer(k: int) -> None:
    rng = np.random.default_rng(k)
    x = Tensor(3.0 * rng.standard_normal((4, 4, 3, 3)))
    p = sn_init(4, 3, dtype=np.float64)
    p.gamma.data[:] = rng.standard_normal(4)
    p.beta.data[:] = rng.standard_normal(4)
    for logits in (p.mean_logits, p.var_logits):
        assert logits is not None
        logits.data[:] = -50.0
        logits.data[k] = 50.0

    out = sn_forward(x, p, compute_stats(x, POOL))
    single = affine_transform(
        standardize(x, compute_moments(x, POOL[k])), p.gamma, p.beta
    )
    assert np.abs(out.data - single.data).max() < 1e-5


def test_two_member_mixture_matches_term_by_term() -> None:
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 2, 2, 2))
    pool = (IN, BN)
    p = sn_init(2, 2, dtype=np.float64)
    p.mean_logits.data[:] = [0.4, -0.2]
    assert p.var_logits is not None
    p.var_logits.data[:] = [-0.7, 0.1]
    p.gamma.data[:] = [1.5, -0.5]
    p.beta.data[:] = [0.2, 0.3]
    eps = 1e-5

    out = sn_forward(Tensor(x), p, compute_stats(Tensor(x), pool), eps).data

    def softmax(v: np.ndarray) -> np.ndarray:
        e = np.exp(v - v.max())
        return e / e.sum()

    w_mean = softmax(p.mean_logits.data)
    w_var = softmax(p.var_logits.data)
    moments = [moments_loop(x, kind.tag) for kind in pool]
    expected = np.zeros_like(x)
    for n in range(2):
        for c in range(2):
            mu = sum(w_mean[k] * moments[k][0][n, c] for k in range(2))
            var = sum(w_var[k] * moments[k][1][n, c] for k in range(2))
            expected[n, c] = (
                p.gamma.data[c] * (x[n, c] - mu) / math.sqrt(var + eps)
                + p.beta.data[c]
            )
    assert np.abs(out - expected).max() < 1e-10


def test_pool_size_mismatch() -> None:
    x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 2, 2)))
    with pytest.raises(NormalizerConfigError):
        sn_forward(x, sn_init(2, 2), compute_stats(x, POOL))


@pytest.mark.parametrize("tied", [False, True])
def test_ratios_ignore_a_common_logit_shift(tied: bool) -> None:
    rng = np.random.default_rng(14)
    p = sn_init(4, 3, tied=tied, dtype=np.float64)
    for logits in p.parameters()[2:]:
        logits.data[:] = rng.standard_normal(3)
    before = [r.data.copy() for r in sn_ratios(p)]

    for logits in p.parameters()[2:]:
        logits.data += 7.5
    after = [r.data for r in sn_ratios(p)]
    for a, b in zip(before, after):
        assert np.abs(a - b).max() < 1e-12
        assert abs(b.sum() - 1.0) < 1e-12


def test_variance_mixes_with_its_own_ratios() -> None:
    rng = np.random.default_rng(15)
    x = Tensor(2.0 * rng.standard_normal((3, 4, 3, 3)) + 1.0)
    stats = compute_stats(x, POOL)
    p = sn_init(4, 3, dtype=np.float64)
    p.mean_logits.data[:] = [1.0, -0.5, 0.2]
    assert p.var_logits is not None
    p.var_logits.data[:] = [-2.0, 0.3, 1.7]

    mean_ratios, var_ratios = sn_ratios(p)
    assert np.abs(mean_ratios.data - var_ratios.data).max() > 0.1

    mixed_mean = np.zeros((3, 4, 1, 1))
    mixed_var = np.zeros((3, 4, 1, 1))
    for k, moments in enumerate(stats):
        mu, var = moments.aligned(4, 4)
        mixed_mean = mixed_mean + mean_ratios.data[k] * mu.data
        mixed_var = mixed_var + var_ratios.data[k] * var.data
    expected = (x.data - mixed_mean) / np.sqrt(mixed_var + 1e-5)
    out = sn_forward(x, p, stats)
    assert np.abs(out.data - expected).max() < 1e-10

    tied = sn_init(4, 3, tied=True, dtype=np.float64)
    tied.mean_logits.data[:] = p.mean_logits.data
    assert np.abs(sn_forward(x, tied, stats).data - out.data).max() > 1e-3
