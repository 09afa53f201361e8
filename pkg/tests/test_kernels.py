"""Backend parity: the compiled kernels must agree with the numpy fallback."""

import numpy as np
import pytest

from silofl import _kernels
from silofl._kernels import numpy_backend as npk

compiled = pytest.importorskip("silofl._kernels._core")


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_active_backend_reported():
    assert _kernels.BACKEND in {"compiled", "numpy"}


def test_dense_forward_parity(rng):
    for n, di, do in [(1, 1, 1), (4, 7, 3), (64, 196, 32)]:
        x = rng.normal(size=(n, di))
        w = rng.normal(size=(di, do))
        b = rng.normal(size=do)
        np.testing.assert_allclose(
            compiled.dense_forward(x, w, b), npk.dense_forward(x, w, b), rtol=1e-12, atol=1e-12
        )
        np.testing.assert_allclose(
            compiled.dense_forward(x, w, None), npk.dense_forward(x, w, None), rtol=1e-12, atol=1e-12
        )


def test_dense_backward_parity(rng):
    x = rng.normal(size=(16, 9))
    w = rng.normal(size=(9, 5))
    gy = rng.normal(size=(16, 5))
    for got, ref in zip(compiled.dense_backward(x, w, gy), npk.dense_backward(x, w, gy)):
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_relu_parity_exact(rng):
    x = rng.normal(size=(8, 11))
    gy = rng.normal(size=(8, 11))
    np.testing.assert_array_equal(compiled.relu_forward(x), npk.relu_forward(x))
    np.testing.assert_array_equal(compiled.relu_backward(x, gy), npk.relu_backward(x, gy))


def test_softmax_xent_parity(rng):
    logits = rng.normal(size=(10, 6)) * 5
    labels = rng.integers(0, 6, size=10)
    loss_c, dl_c = compiled.softmax_xent(logits, labels)
    loss_n, dl_n = npk.softmax_xent(logits.copy(), labels)
    assert loss_c == pytest.approx(loss_n, rel=1e-12)
    np.testing.assert_allclose(dl_c, dl_n, rtol=1e-12, atol=1e-14)
