"""Gradient checks of every normalization layer at 64-bit."""

import numpy as np
import pytest

from exnorm.gradcheck import check_layer, gradient_check_report
from exnorm.tensor import Tensor, tensor_sum
from exnorm.types import ENConfigError, GradientCheckError

SHAPE = (2, 4, 3, 3)

LAYERS = ["bn", "in", "ln", "gn", "sn", "en", "en-a", "en-b", "en-c", "en-d"]


@pytest.mark.parametrize("layer", LAYERS)
def test_layer_gradients(layer: str) -> None:
    report = check_layer(layer, SHAPE, seed=1)
    assert "input" in report
    assert max(report.values()) < 1e-4


@pytest.mark.parametrize("layer", ["bn", "in", "ln", "gn"])
def test_affine_parameters_are_exact(layer: str) -> None:
    report = check_layer(layer, SHAPE, seed=2)
    assert report[f"{layer}.gamma"] < 1e-6
    assert report[f"{layer}.beta"] < 1e-6


def test_en_reports_every_group() -> None:
    report = check_layer("en", SHAPE, r=2)
    assert set(report) == {
        "input",
        "en.gamma.0",
        "en.gamma.1",
        "en.gamma.2",
        "en.beta.0",
        "en.beta.1",
        "en.beta.2",
        "en.conv_w",
        "en.fc1_w",
        "en.fc1_b",
        "en.fc2_w",
        "en.fc2_b",
    }


def test_en_channels_must_divide_by_r() -> None:
    with pytest.raises(ENConfigError):
        check_layer("en", (2, 5, 3, 3), r=4)


def test_report_preconditions() -> None:
    x32 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True, name="x")
    with pytest.raises(GradientCheckError):
        gradient_check_report(lambda: tensor_sum(x32), [x32])

    unnamed = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientCheckError):
        gradient_check_report(lambda: tensor_sum(unnamed), [unnamed])

    with pytest.raises(GradientCheckError):
        check_layer("bn", (2, 4))


def test_values_are_restored() -> None:
    x = Tensor(
        np.random.default_rng(0).standard_normal(5),
        requires_grad=True,
        name="x",
    )
    before = x.data.copy()
    gradient_check_report(lambda: tensor_sum(x * x), [x], samples=None)
    assert np.array_equal(x.data, before)
