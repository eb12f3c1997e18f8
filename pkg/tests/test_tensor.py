import numpy as np
import pytest

from ood_watermark.errors import OodWatermarkInvalidArgumentError
from ood_watermark.tensor import (
    SeededRng,
    as_tensor,
    fd_gradient,
    gradient_relative_error,
    sample_gaussian,
    signum,
    stage_seed,
)


def test_gaussian_with_zero_std_is_the_mean():
    draws = sample_gaussian(SeededRng(0), (3, 5), mean=1.5, std=0.0)
    assert draws.dtype == np.float32
    assert np.all(draws == np.float32(1.5))


def test_gaussian_is_reproducible_per_seed():
    first = sample_gaussian(SeededRng(42), 101)
    second = sample_gaussian(SeededRng(42), 101)
    other = sample_gaussian(SeededRng(43), 101)
    assert np.array_equal(first, second)
    assert not np.array_equal(first, other)


def test_gaussian_moments():
    draws = sample_gaussian(SeededRng(7), 100_000, mean=0.0, std=1.0).astype(np.float64)
    assert abs(draws.mean()) < 0.02
    assert abs(draws.std() - 1.0) < 0.02


def test_gaussian_rejects_negative_std_and_empty_shapes():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        sample_gaussian(SeededRng(0), 4, std=-1.0)
    with pytest.raises(OodWatermarkInvalidArgumentError):
        sample_gaussian(SeededRng(0), (2, 0))


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(0, "model") == stage_seed(0, "model")
    assert stage_seed(0, "model") != stage_seed(0, "train")
    assert stage_seed(0, "model") != stage_seed(1, "model")
    a = SeededRng.derive(3, "data").uniform(4)
    b = SeededRng.derive(3, "data").uniform(4)
    assert np.array_equal(a, b)


def test_signum():
    assert signum([-2.0, 0.0, 3.5]).tolist() == [-1.0, 0.0, 1.0]


def test_as_tensor_rejects_non_finite():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        as_tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        as_tensor([np.inf])


def test_fd_gradient_of_a_quadratic():
    grad = fd_gradient(lambda v: float(np.sum(v**2)), [1.0, -2.0, 0.5])
    assert grad == pytest.approx([2.0, -4.0, 1.0], abs=1e-9)


def test_fd_gradient_of_a_product():
    grad = fd_gradient(lambda v: float(v[0] * v[1]), [3.0, -4.0])
    assert grad == pytest.approx([-4.0, 3.0], abs=1e-9)


def test_fd_gradient_rejects_non_positive_step():
    with pytest.raises(OodWatermarkInvalidArgumentError):
        fd_gradient(lambda v: 0.0, [1.0], h=0.0)


def test_gradient_relative_error():
    assert gradient_relative_error([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert gradient_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert gradient_relative_error([1.0, 2.2], [1.0, 2.0]) == pytest.approx(0.2 / 2.2)
