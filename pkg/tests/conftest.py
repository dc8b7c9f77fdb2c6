import numpy as np
import pytest

from djda.losses import Batch
from djda.model import ModelConfig, build_model


def central_diff(fn, arr, h=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = fn()
        arr[idx] = orig - h
        down = fn()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-4, atol=1e-6):
    err = np.abs(analytic - numeric)
    bound = atol + rel * np.maximum(np.abs(analytic), np.abs(numeric))
    assert np.all(err <= bound), f"max excess {np.max(err - bound):.3e}"


def random_batch(rng, n_s=6, n_t=4, d=5, c=3, k=3):
    return Batch(rng.normal(size=(n_s, d)), rng.integers(0, c, n_s), rng.integers(0, k, n_s),
                 rng.normal(size=(n_t, d)))


def small_model(seed=0, d=5, c=3, k=3, activation="leaky_relu", **kw):
    kw.setdefault("feature_dims", [6, 4])
    kw.setdefault("discriminator_dims", [3])
    return build_model(ModelConfig(input_dim=d, c=c, k=k, activation=activation, seed=seed, **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
