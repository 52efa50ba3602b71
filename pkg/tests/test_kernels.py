import numpy as np
import pytest

from bimanual_transfer import kernels
from bimanual_transfer import _kernels_py as py

compiled = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def test_backend_name_consistent():
    assert kernels.BACKEND_NAME == ("cython" if compiled is not None else "python")


def test_python_softmax_xent_reference(rng):
    x = rng.standard_normal((4, 6))
    t = rng.integers(0, 6, 4)
    loss, probs = py.softmax_xent(x, t)
    ref = -np.log(np.exp(x) / np.exp(x).sum(1, keepdims=True))[np.arange(4), t]
    np.testing.assert_allclose(loss, ref, rtol=1e-12)
    np.testing.assert_allclose(probs.sum(1), 1.0)


def test_python_lasso_zero_when_penalty_large(rng):
    Z = rng.standard_normal((10, 3))
    y = rng.standard_normal(10)
    lam = np.abs(Z.T @ y).max() + 1.0
    assert np.all(py.lasso_cd(Z, y, lam) == 0)


@needs_compiled
def test_softmax_xent_parity(rng):
    x = rng.standard_normal((16, 144)) * 5
    t = rng.integers(0, 144, 16)
    for a, b in zip(compiled.softmax_xent(x, t), py.softmax_xent(x, t)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


@needs_compiled
def test_sym_kl_parity(rng):
    a, b = rng.uniform(0, 1, (8, 144)), rng.uniform(0, 1, (8, 144))
    a[0] = 0.0  # all-zero row exercises the uniform fallback
    for x, y in zip(compiled.sym_kl(a, b, 1e-8), py.sym_kl(a, b, 1e-8)):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-14)


@needs_compiled
def test_lasso_parity(rng):
    Z = rng.standard_normal((32, 8))
    y = rng.standard_normal(32)
    np.testing.assert_allclose(compiled.lasso_cd(Z, y, 0.3, 5000, 1e-13),
                               py.lasso_cd(Z, y, 0.3, 5000, 1e-13), atol=1e-9)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_parity(rng, dtype):
    p = rng.standard_normal((20, 3)).astype(dtype)
    state = [[p.copy(), np.zeros_like(p), np.zeros_like(p)] for _ in range(2)]
    for t in range(1, 6):
        g = rng.standard_normal(p.shape).astype(dtype)
        compiled.adam_update(*state[0][:1], g, *state[0][1:], 1e-2, 0.9, 0.999, 1e-8, 1e-3, t)
        py.adam_update(*state[1][:1], g, *state[1][1:], 1e-2, 0.9, 0.999, 1e-8, 1e-3, t)
    tol = 1e-6 if dtype == np.float32 else 1e-13
    for a, b in zip(state[0], state[1]):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
