"""Tests for normalizer statistics, standardization and running stats."""

import math
from typing import Tuple

import numpy as np
import pytest

from exnorm.normalizers import (
    BN,
    GN,
    IN,
    LN,
    MomentPair,
    NormalizerKind,
    RunningStats,
    StatsBundle,
    affine_transform,
    compute_moments,
    compute_stats,
    standardize,
    update_running,
)
from exnorm.tensor import Tensor
from exnorm.types import NormalizerConfigError, ShapeMismatchError

from .oracles import moments_loop, standardize_loop

KINDS = [BN, IN, LN, GN(2)]


def test_parse_kinds() -> None:
    assert NormalizerKind.parse("bn") == BN
    assert NormalizerKind.parse(" In ") == IN
    assert NormalizerKind.parse("gn4") == GN(4)
    assert NormalizerKind.parse("gn:4") == GN(4)
    assert NormalizerKind.parse("GN(4)") == GN(4)
    assert str(GN(4)) == "GN(4)"
    for bad in ("xn", "bn2", ""):
        with pytest.raises(NormalizerConfigError):
            NormalizerKind.parse(bad)
    with pytest.raises(NormalizerConfigError):
        NormalizerKind("GN", 0)


def test_instance_moments() -> None:
    x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
    m = compute_moments(x, IN)
    assert m.mean.data.tolist() == [[4.0]]
    assert math.isclose(float(m.std[0, 0]), math.sqrt(5.0), rel_tol=1e-12)


def test_batch_moments() -> None:
    x = np.zeros((2, 1, 2, 2))
    x[1] = 4.0
    m = compute_moments(Tensor(x), BN)
    assert m.mean.data.tolist() == [2.0]
    assert m.std.tolist() == [2.0]


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_constant_input(kind: NormalizerKind) -> None:
    x = Tensor(np.full((2, 4, 3, 3), 1.5))
    m = compute_moments(x, kind)
    assert m.mean.shape == kind.moment_shape(2, 4)
    assert np.all(m.mean.data == 1.5)
    assert np.all(m.std == 0.0)
    assert not standardize(x, m).data.any()


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_moments_match_loops(kind: NormalizerKind) -> None:
    x = np.random.default_rng(5).standard_normal((3, 4, 2, 3))
    m = compute_moments(Tensor(x), kind)
    mean, var = m.aligned(4, 4)
    expected_mean, expected_var = moments_loop(
        x, kind.tag, max(kind.groups, 1)
    )
    got_mean = np.broadcast_to(mean.data, (3, 4, 1, 1))[..., 0, 0]
    got_var = np.broadcast_to(var.data, (3, 4, 1, 1))[..., 0, 0]
    assert np.abs(got_mean - expected_mean).max() < 1e-12
    assert np.abs(got_var - expected_var).max() < 1e-12


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_standardized_moments(kind: NormalizerKind) -> None:
    rng = np.random.default_rng(8)
    x = Tensor(3.0 + 2.0 * rng.standard_normal((4, 4, 5, 5)))
    out = standardize(x, compute_moments(x, kind))
    again = compute_moments(out, kind)
    assert np.abs(again.mean.data).max() < 1e-6
    assert np.abs(again.var.data - 1.0).max() < 1e-4

    expected = standardize_loop(x.data, kind.tag, 1e-5, max(kind.groups, 1))
    assert np.abs(out.data - expected).max() < 1e-10


def test_standardize_examples() -> None:
    x = Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
    out = standardize(x, compute_moments(x, IN), eps=1e-12)
    expected = np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(5.0)
    assert np.abs(out.data.reshape(-1) - expected).max() < 1e-9

    y = Tensor(5.0 * np.random.default_rng(2).standard_normal((2, 3, 4, 4)))
    scaled = y * 10.0
    for kind in KINDS:
        a = standardize(y, compute_moments(y, kind))
        b = standardize(scaled, compute_moments(scaled, kind))
        assert np.abs(a.data - b.data).max() < 1e-5

    with pytest.raises(NormalizerConfigError):
        standardize(y, compute_moments(y, IN), eps=0.0)


def test_standardize_pooled_view() -> None:
    x = Tensor(np.random.default_rng(4).standard_normal((2, 4, 3, 3)))
    pooled = Tensor(x.data.mean(axis=(2, 3)))
    for kind in KINDS:
        m = compute_moments(x, kind)
        assert standardize(pooled, m).shape == (2, 4)


def test_gn_rejects_indivisible_channels() -> None:
    with pytest.raises(NormalizerConfigError):
        compute_moments(Tensor(np.zeros((1, 3, 2, 2))), GN(2))


def test_moments_need_4d() -> None:
    with pytest.raises(ShapeMismatchError):
        compute_moments(Tensor(np.zeros((2, 3))), BN)


def test_affine_transform() -> None:
    rng = np.random.default_rng(1)
    x_hat = rng.standard_normal((2, 3, 2, 2))
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.array_equal(
        affine_transform(Tensor(x_hat), ones, zeros).data, x_hat
    )

    shift = Tensor(np.array([1.0, -2.0, 0.5]))
    out = affine_transform(Tensor(np.zeros((2, 3, 2, 2))), ones, shift).data
    assert np.all(out[:, 1] == -2.0)

    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    out = affine_transform(Tensor(x_hat), Tensor(gamma), Tensor(beta)).data
    expected = np.empty_like(x_hat)
    for n in range(2):
        for c in range(3):
            expected[n, c] = gamma[c] * x_hat[n, c] + beta[c]
    assert np.abs(out - expected).max() < 1e-12

    with pytest.raises(ShapeMismatchError):
        affine_transform(Tensor(x_hat), Tensor(np.ones(2)), zeros)


def _bn_pair(mean: float, var: float, channels: int = 2) -> MomentPair:
    return MomentPair(
        Tensor(np.full(channels, mean)),
        Tensor(np.full(channels, var)),
        BN,
        BN.reduced_axes(),
    )


def test_update_running() -> None:
    rs = RunningStats(np.zeros(2), np.zeros(2), 0.1)
    updated = update_running(rs, _bn_pair(2.0, 0.0))
    assert np.allclose(updated.mean, 0.2, rtol=0, atol=1e-15)

    fixed = RunningStats(np.full(2, 3.0), np.full(2, 0.5), 0.1)
    same = update_running(fixed, _bn_pair(3.0, 0.5))
    assert np.allclose(same.mean, fixed.mean, rtol=1e-12, atol=0)
    assert np.allclose(same.var, fixed.var, rtol=1e-12, atol=0)

    rs = RunningStats.initial(2)
    batch = _bn_pair(-1.5, 4.0)
    for _ in range(1000):
        rs = update_running(rs, batch)
    assert np.abs(rs.mean + 1.5).max() < 1e-6
    assert np.abs(rs.var - 4.0).max() < 1e-6


def test_update_running_needs_bn() -> None:
    x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 2, 2)))
    with pytest.raises(NormalizerConfigError):
        update_running(RunningStats.initial(2), compute_moments(x, IN))
    with pytest.raises(NormalizerConfigError):
        RunningStats.initial(2, momentum=1.0)


def test_compute_stats_uses_running_bn() -> None:
    x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 2, 2)))
    running = RunningStats(np.full(2, 7.0), np.full(2, 3.0))
    stats = compute_stats(x, (IN, LN, BN), running)
    assert stats.kinds == (IN, LN, BN)
    assert np.all(stats.for_kind(BN).mean.data == 7.0)
    assert not np.all(stats.for_kind(IN).mean.data == 7.0)


def test_bundle_rejects_duplicates() -> None:
    x = Tensor(np.zeros((1, 2, 2, 2)))
    with pytest.raises(NormalizerConfigError):
        StatsBundle((compute_moments(x, IN), compute_moments(x, IN)))
    bundle = compute_stats(x, (IN, LN))
    with pytest.raises(NormalizerConfigError):
        bundle.for_kind(BN)


def _aligned(x: Tensor, kind: NormalizerKind) -> Tuple[np.ndarray, ...]:
    mean, var = compute_moments(x, kind).aligned(4, x.shape[1])
    shape = x.shape[:2] + (1, 1)
    return (
        np.broadcast_to(mean.data, shape),
        np.broadcast_to(var.data, shape),
    )


@pytest.mark.parametrize("shape", [(2, 4, 3, 3), (3, 6, 2, 5), (1, 2, 4, 4)])
def test_group_norm_limits(shape: Tuple[int, ...]) -> None:
    x = Tensor(np.random.default_rng(sum(shape)).standard_normal(shape))
    channels = shape[1]
    for gn, other in ((GN(1), LN), (GN(channels), IN)):
        for a, b in zip(_aligned(x, gn), _aligned(x, other)):
            assert np.abs(a - b).max() < 1e-12
        out_gn = standardize(x, compute_moments(x, gn)).data
        out_other = standardize(x, compute_moments(x, other)).data
        assert np.abs(out_gn - out_other).max() < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_moments_under_sample_permutation(seed: int) -> None:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 4, 3, 3))
    perm = rng.permutation(5)

    bn = compute_moments(Tensor(x), BN)
    bn_perm = compute_moments(Tensor(x[perm]), BN)
    assert np.abs(bn.mean.data - bn_perm.mean.data).max() < 1e-12
    assert np.abs(bn.var.data - bn_perm.var.data).max() < 1e-12

    for kind in (IN, LN, GN(2)):
        m = compute_moments(Tensor(x), kind)
        m_perm = compute_moments(Tensor(x[perm]), kind)
        assert np.abs(m.mean.data[perm] - m_perm.mean.data).max() < 1e-12
        assert np.abs(m.var.data[perm] - m_perm.var.data).max() < 1e-12
