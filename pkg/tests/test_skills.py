import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimanual_transfer import diffcore as dc
from bimanual_transfer.lang import template_embeddings
from bimanual_transfer.skills import (SkillManager, SkillSchedule, decomposability, export_skill_trace,
                                      fit_sparse_weights, init_library, lasso_oracle, reconstruct, skill_loss,
                                      support_of, synthetic_problem)

TEMPLATES = [f"do task number {i} with the ___ thing" for i in range(18)]


def test_library_rows_equal_template_embeddings():
    lib = init_library(TEMPLATES, 18, 64, seed=0)
    np.testing.assert_array_equal(lib.primitives.data, np.stack(template_embeddings(TEMPLATES, 0, 64)))


def test_library_extra_rows_random_unit():
    lib = init_library(TEMPLATES[:2], 4, 16, seed=3)
    np.testing.assert_array_equal(lib.primitives.data[:2], np.stack(template_embeddings(TEMPLATES[:2], 3, 16)))
    np.testing.assert_allclose(np.linalg.norm(lib.primitives.data[2:], axis=1), 1.0)


def test_library_rejects_nonpositive_k():
    with pytest.raises(ValueError):
        init_library(TEMPLATES, 0, 8)


def _manager(K=5, D=8, in_dim=10, seed=0, head="softmax"):
    store = dc.ParamStore(seed)
    return store, SkillManager(store, in_dim, K, D, hidden=16, weights_head=head)


def test_untrained_manager_is_uniform():
    _, m = _manager()
    s = m(np.ones(4), np.ones(3), np.ones(3))
    np.testing.assert_allclose(s.weights_left.data, 1 / 5)
    np.testing.assert_allclose(s.weights_right.data, 1 / 5)


def test_manager_is_pure_and_checks_dims():
    store, m = _manager()
    for t in store.params.values():
        t.data = np.random.default_rng(1).standard_normal(t.shape)
    a = m(np.ones(4), np.ones(3), np.ones(3))
    b = m(np.ones(4), np.ones(3), np.ones(3))
    assert np.array_equal(a.weights_left.data, b.weights_left.data)
    np.testing.assert_allclose(a.weights_right.data.sum(), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        m(np.ones(5), np.ones(3), np.ones(3))


@pytest.mark.parametrize("seed", range(10))
def test_manager_gradient(seed):
    r = np.random.default_rng(seed)
    store, m = _manager(seed=seed)
    for t in store.params.values():
        t.data = r.standard_normal(t.shape) * 0.5
    Z = r.standard_normal((5, 8))
    x = r.standard_normal(10)
    target = r.standard_normal(8)

    def loss():
        s = m(x[:4], x[4:7], x[7:])
        d = dc.sub(reconstruct(s.weights_left, s.comp_left, Z), target)
        return dc.add(dc.sum_(dc.mul(d, d)), dc.sum_(dc.mul(s.weights_right, s.weights_right)))

    assert dc.param_grad_check(loss, store) < 1e-4


def test_reconstruct_examples():
    Z = np.array([[1.0, 0.0, 2.0], [0.0, 4.0, 2.0]])
    np.testing.assert_array_equal(reconstruct(np.array([0.0, 1.0]), np.zeros(3), Z).data, Z[1])
    np.testing.assert_array_equal(reconstruct(np.array([0.5, 0.5]), np.zeros(3), Z).data, [0.5, 2.0, 2.0])
    e = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(reconstruct(np.zeros(2), e, Z).data, e)
    with pytest.raises(ValueError):
        reconstruct(np.zeros(3), e, Z)


def _sched(wl, wr, el, er):
    return SkillSchedule(*(dc.Tensor(np.asarray(x, dtype=float)) for x in (wl, wr, el, er)))


def test_skill_loss_examples():
    one_hot = np.eye(4)[1]
    assert skill_loss(_sched(one_hot, one_hot, np.zeros(3), np.zeros(3)), 7.0).item() == 2.0
    sm = dc.softmax(np.array([0.3, -1.0, 2.0, 0.1])).data
    assert abs(skill_loss(_sched(sm, sm, np.zeros(3), np.zeros(3)), 1.0).item() - 2.0) < 1e-12
    assert skill_loss(_sched(np.zeros(4), np.zeros(4), [3.0, 4.0], [0.0, 0.0]), 2.0).item() == 10.0


def test_skill_loss_rejects_negative_lambda():
    with pytest.raises(ValueError):
        skill_loss(_sched(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2)), -1.0)


@pytest.mark.parametrize("seed", range(10))
def test_skill_loss_gradient_away_from_zero(seed):
    r = np.random.default_rng(seed)
    args = [r.standard_normal(6), r.standard_normal(6), r.standard_normal((3, 4)) + 0.5,
            r.standard_normal((3, 4)) + 0.5]
    f = lambda wl, wr, el, er: skill_loss(SkillSchedule(wl, wr, el, er), 0.7)
    assert dc.grad_check(f, args) < 1e-4


def test_decomposability_examples():
    assert decomposability(np.eye(18)[3]) == 0.0
    assert abs(decomposability(np.full(18, 1 / 18)) - math.log(18)) < 1e-9
    assert abs(decomposability(np.array([0.5, 0.5, 0, 0])) - math.log(2)) < 1e-12
    with pytest.raises(ValueError):
        decomposability(np.array([1.5, -0.5]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=18).filter(lambda v: sum(v) > 1e-6))
def test_decomposability_bounds(ws):
    w = np.array(ws) / sum(ws)
    h = decomposability(w)
    assert -1e-12 <= h <= math.log(len(w)) + 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_reconstruct_is_linear(seed, a, b):
    r = np.random.default_rng(seed)
    Z = r.standard_normal((5, 7))
    w1, w2, e1, e2 = r.standard_normal(5), r.standard_normal(5), r.standard_normal(7), r.standard_normal(7)
    lhs = reconstruct(a * w1 + b * w2, a * e1 + b * e2, Z).data
    rhs = a * reconstruct(w1, e1, Z).data + b * reconstruct(w2, e2, Z).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_reconstruct_scale_covariance(seed, c):
    r = np.random.default_rng(seed)
    Z, w = r.standard_normal((4, 6)), r.standard_normal(4)
    np.testing.assert_allclose(reconstruct(w, np.zeros(6), c * Z).data, c * reconstruct(w, np.zeros(6), Z).data,
                               atol=1e-9)


def test_trace_record_count_and_argmax():
    roll = [{"timestep": t, "weights_left": np.eye(4)[t], "weights_right": np.full(4, 0.25)} for t in range(3)]
    recs = export_skill_trace(roll)
    assert len(recs) == 6
    for r in recs:
        assert r["nearest_primitive_index"] == int(np.argmax(r["weights"]))
    with pytest.raises(ValueError):
        export_skill_trace([])


def test_proximal_fit_matches_lasso_oracle():
    rng = np.random.default_rng(5)
    Z, y, _, _ = synthetic_problem(rng)
    w_tape = fit_sparse_weights(Z, y, 0.05, iters=3000)
    w_cd = lasso_oracle(Z, y, 0.05)
    np.testing.assert_allclose(w_tape, w_cd, atol=1e-5)


def test_support_count_nonincreasing_in_lambda():
    lams = [0.0, 0.01, 0.1, 1.0]
    counts = np.zeros(len(lams))
    for seed in range(3):
        rng = np.random.default_rng(seed)
        for _ in range(10):
            Z, y, _, _ = synthetic_problem(rng)
            for i, lam in enumerate(lams):
                counts[i] += len(support_of(fit_sparse_weights(Z, y, lam)))
    assert np.all(np.diff(counts) <= 0), counts
