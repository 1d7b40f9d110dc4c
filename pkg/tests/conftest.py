# coding: utf-8
import numpy as np
import pytest

from naelutils.dataset import DatasetSpec, TFIDataset, generate_dataset
from naelutils.nael_model import NaelModel, NetworkConfig
from naelutils.tensor_nn import Tensor
from naelutils.tfa import CWDConfig


def central_difference(func, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Gradient of the scalar `func()` with respect to the array `x`, perturbed in place"""
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        saved = x[index]
        x[index] = saved + h
        plus = func()
        x[index] = saved - h
        minus = func()
        x[index] = saved
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_gradients(build, *arrays: np.ndarray, seed: int = 0) -> float:
    """
    Largest relative error between autograd and central differences, over every input of `build`.

    `build` maps tensors to one output tensor, which is contracted with a fixed random cotangent to get a scalar.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    cotangent = np.random.default_rng(seed).standard_normal(out.shape)
    (out * cotangent).sum().backward()

    def scalar() -> float:
        return float(np.sum(build(*[Tensor(a) for a in arrays]).data * cotangent))

    return max(relative_error(t.grad, central_difference(scalar, a)) for t, a in zip(tensors, arrays))


def normalized_images(n: int, size: int, seed: int = 0) -> np.ndarray:
    images = np.random.default_rng(seed).standard_normal((n, size, size))
    images -= images.mean(axis=(1, 2), keepdims=True)
    images /= images.std(axis=(1, 2), keepdims=True)
    return images


@pytest.fixture
def gradcheck():
    return check_gradients


@pytest.fixture
def make_images():
    return normalized_images


@pytest.fixture
def compact_config() -> NetworkConfig:
    return NetworkConfig.compact()


@pytest.fixture
def model64(compact_config) -> NaelModel:
    return NaelModel(compact_config, seed=0, dtype=np.float64)


@pytest.fixture
def small_cwd() -> CWDConfig:
    """32x32 images from 256-sample signals"""
    return CWDConfig(lag_window=33, mu_window=17, out_height=32, out_width=32)


@pytest.fixture(scope="session")
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(
        per_class=10,
        n_samples=256,
        seed=7,
        tfi=CWDConfig(lag_window=33, mu_window=17, out_height=32, out_width=32),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec) -> TFIDataset:
    """120 records, 10 per class, 32x32 images"""
    return generate_dataset(tiny_spec, processes=1, progress=False)
