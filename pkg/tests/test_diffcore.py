import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimanual_transfer import diffcore as dc


def test_linear_matches_manual(rng):
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)
    np.testing.assert_allclose(dc.linear(x, W, b).data, x @ W.T + b)


def test_linear_shape_error():
    with pytest.raises(ValueError):
        dc.linear(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))


def test_softmax_rows_sum_to_one(rng):
    p = dc.softmax(rng.standard_normal((5, 7)) * 30).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_softmax_empty_raises():
    with pytest.raises(ValueError):
        dc.softmax(np.zeros(0))


def test_cross_entropy_uniform_is_log_k():
    assert abs(dc.cross_entropy(np.zeros(4), 2).item() - math.log(4)) < 1e-9


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        dc.cross_entropy(np.zeros(4), 4)


def test_kl_identical_is_zero(rng):
    p = dc.softmax(rng.standard_normal(6)).data
    assert abs(dc.kl_divergence(p, p).item()) < 1e-12


def test_kl_known_value():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert abs(dc.kl_divergence(p, q, eps=0.0).item() - expected) < 1e-12


def test_log_rejects_nonpositive():
    with pytest.raises(FloatingPointError):
        dc.log(np.array([1.0, 0.0]))


def test_l21_zero_row_has_zero_subgradient():
    M = dc.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    out = dc.l21_norm(M)
    out.backward()
    assert out.item() == 5.0
    np.testing.assert_allclose(M.grad, [[0, 0], [0.6, 0.8]])


def test_backward_accumulates_shared_inputs():
    x = dc.Tensor(np.array([2.0, -1.0]), requires_grad=True)
    dc.sum_(dc.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [4.0, -2.0])


def test_weighted_sum_value():
    a, b = dc.Tensor(np.array(2.0)), dc.Tensor(np.array(3.0))
    assert dc.weighted_sum([(0.5, a), (2.0, b)]).item() == 7.0


def test_param_store_duplicate_name():
    store = dc.ParamStore(0)
    store.add("w", (2, 2))
    with pytest.raises(KeyError):
        store.add("w", (2, 2))


def test_param_store_is_seed_deterministic():
    a, b = dc.ParamStore(7), dc.ParamStore(7)
    for s in (a, b):
        s.add("x", (3, 5))
        s.add("y", (4,), "unit_rows")
    for k in a.state_dict():
        assert np.array_equal(a.state_dict()[k], b.state_dict()[k])


def test_load_arrays_reports_missing_and_unexpected():
    store = dc.ParamStore(0)
    store.add("a", (2,))
    store.add("b", (2,))
    loaded, missing, unexpected = store.load_arrays({"a": np.ones(2), "c": np.ones(2)})
    assert loaded == ["a"] and missing == ["b"] and unexpected == ["c"]
    np.testing.assert_array_equal(store["a"].data, np.ones(2))


def test_optimizers_reduce_quadratic():
    for name, cls in dc.OPTIMIZERS.items():
        store = dc.ParamStore(0)
        w = store.add("w", (3,))
        w.data = np.array([1.0, -2.0, 0.5])
        opt = cls(store, lr=0.05)
        start = float((w.data ** 2).sum())
        for _ in range(50):
            store.zero_grad()
            dc.sum_(dc.mul(w, w)).backward()
            opt.step()
        assert float((w.data ** 2).sum()) < start, name


def test_optimizer_exclude_freezes_parameter():
    store = dc.ParamStore(0)
    w = store.add("w", (3,))
    before = w.data.copy()
    opt = dc.Adam(store, lr=0.1, exclude=["w"])
    dc.sum_(dc.mul(w, w)).backward()
    opt.step()
    assert np.array_equal(w.data, before)


def test_float32_mode_creates_float32_params():
    dc.set_default_dtype("float32")
    store = dc.ParamStore(0)
    assert store.add("w", (2, 2)).data.dtype == np.float32


# -------------------------------------------------------------------------
# finite-difference checks


SEEDS = range(10)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear(seed):
    r = np.random.default_rng(seed)
    err = dc.grad_check(lambda x, W, b: dc.sum_(dc.mul(dc.linear(x, W, b), dc.linear(x, W, b))),
                        [r.standard_normal((3, 4)), r.standard_normal((5, 4)), r.standard_normal(5)])
    assert err < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((2, 6))
    assert dc.grad_check(lambda x: dc.sum_(dc.mul(dc.softmax(x), w)), [r.standard_normal((2, 6))]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_cross_entropy(seed):
    r = np.random.default_rng(seed)
    t = r.integers(0, 5, size=3)
    assert dc.grad_check(lambda x: dc.sum_(dc.cross_entropy(x, t)), [r.standard_normal((3, 5))]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_kl(seed):
    r = np.random.default_rng(seed)
    p0, q0 = r.uniform(0.1, 1, 7), r.uniform(0.1, 1, 7)
    assert dc.grad_check(lambda p, q: dc.kl_divergence(dc.normalize(p), dc.normalize(q)), [p0, q0]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_and_shape_ops(seed):
    r = np.random.default_rng(seed)
    x0 = r.standard_normal((2, 3, 4)) + 0.05
    m0 = r.uniform(0.1, 0.9, (2, 3))
    v0 = r.standard_normal((2, 8))

    def f(x, m, v):
        s = dc.scale_channels(x, m)
        c = dc.concat([dc.reshape(s, (2, 12)), dc.sigmoid(dc.reshape(x, (2, 12)))], axis=-1)
        y = dc.matvec(dc.reshape(x, (2, 3, 4)), dc.take(v, np.arange(4), axis=-1))
        z = dc.add(dc.sum_(dc.relu(c)), dc.sum_(dc.abs_(y)))
        return dc.add(z, dc.mean(dc.log(dc.sigmoid(v))))

    assert dc.grad_check(f, [x0, m0, v0]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_l21_and_sym_kl(seed):
    r = np.random.default_rng(seed)
    M0 = r.standard_normal((3, 4))
    assert dc.grad_check(lambda M: dc.l21_norm(M), [M0]) < 1e-4
    a0, b0 = r.uniform(0.05, 1, (2, 9)), r.uniform(0.05, 1, (2, 9))
    assert dc.grad_check(lambda a, b: dc.sum_(dc.sym_kl(a, b)), [a0, b0]) < 1e-4


def test_sym_kl_matches_generic_composition(rng):
    a, b = rng.uniform(0.01, 1, (4, 10)), rng.uniform(0.01, 1, (4, 10))
    fused = dc.sym_kl(a, b).data
    p, q = dc.normalize(a), dc.normalize(b)
    generic = 0.5 * (dc.kl_divergence(p, q).data + dc.kl_divergence(q, p).data)
    np.testing.assert_allclose(fused, generic, rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=12))
def test_softmax_invariant_to_shift(xs):
    x = np.array(xs)
    np.testing.assert_allclose(dc.softmax(x).data, dc.softmax(x + 3.7).data, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 5), min_size=2, max_size=10), st.lists(st.floats(0.01, 5), min_size=2, max_size=10))
def test_kl_nonnegative(ps, qs):
    n = min(len(ps), len(qs))
    p = np.array(ps[:n]) / sum(ps[:n])
    q = np.array(qs[:n]) / sum(qs[:n])
    assert dc.kl_divergence(p, q).item() >= -1e-12
