from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrs_microstack.core import rot_z, vec3
from mrs_microstack.estimation import NotInitialized, SourceNeverSeen, StateEstimator, UnknownSource


def started(sigma=0.1, pos=(0.0, 0.0, 0.0), heading=0.0):
    est = StateEstimator()
    est.register_source("a", sigma)
    est.correct("a", np.array(pos, dtype=float), heading)
    return est


def test_predict_at_rest_grows_covariance_only():
    est = started()
    p0, tr0 = est.x[:, 0].copy(), est.trace()
    est.predict(vec3(), 0.0, 0.01)
    assert np.array_equal(est.x[:, 0], p0)
    assert est.trace() > tr0


def test_predict_constant_acceleration():
    est = started()
    for _ in range(100):
        est.predict(vec3(1.0, 0.0, 0.0), 0.0, 0.01)
    assert est.x[:, 1] == pytest.approx([1.0, 0.0, 0.0], abs=1e-6)
    assert est.x[:, 0] == pytest.approx([0.5, 0.0, 0.0], abs=1e-6)


def test_trace_non_decreasing_without_corrections():
    est = started()
    traces = []
    for _ in range(200):
        est.predict(vec3(0.3, -0.1, 0.2), 0.1, 0.01)
        traces.append(est.trace())
    assert np.all(np.diff(traces) >= 0.0)


def test_zero_innovation_keeps_mean_and_shrinks_covariance():
    est = started()
    est.predict(vec3(), 0.0, 0.01)
    mean, tr = est.x[:, 0].copy(), est.trace()
    assert est.correct("a", mean.copy(), est.heading)
    assert np.allclose(est.x[:, 0], mean, atol=1e-15)
    assert est.trace() < tr


def test_gate_rejects_outlier():
    est = started(0.1)
    x, p = est.x.copy(), est.P.copy()
    assert not est.correct("a", vec3(100.0, 0.0, 0.0), 0.0)
    assert np.array_equal(est.x, x) and np.array_equal(est.P, p)
    assert est.sources["a"].rejected == 1


def test_scalar_kalman_update():
    est = started(1.0)
    assert est.correct("a", vec3(1.0, 1.0, 1.0), 0.0)
    assert est.x[:, 0] == pytest.approx([0.5, 0.5, 0.5], abs=1e-12)
    assert est.P[:, 0, 0] == pytest.approx([0.5, 0.5, 0.5], abs=1e-12)


def test_unknown_and_unseen_sources():
    est = started()
    est.register_source("b", 0.2)
    with pytest.raises(UnknownSource):
        est.correct("zzz", vec3(), 0.0)
    with pytest.raises(SourceNeverSeen):
        est.switch_source("b")
    with pytest.raises(NotInitialized):
        StateEstimator().get_state()


def test_switch_to_agreeing_source():
    est = started()
    est.register_source("b", 0.2)
    est.correct("b", vec3(), 0.0)
    before = est.get_state().position
    est.switch_source("b")
    assert np.array_equal(est.sources["b"].offset, np.zeros(3))
    assert np.array_equal(est.get_state().position, before)


def test_switch_to_biased_source_records_offset():
    est = started(pos=(1.0, 2.0, 3.0))
    est.register_source("b", 0.05, frame_aligned=False)
    est.correct("b", vec3(6.0, 2.0, 3.0), 0.0)
    before = est.get_state().position
    est.switch_source("b")
    assert est.sources["b"].offset == pytest.approx([-5.0, 0.0, 0.0], abs=1e-12)
    assert np.allclose(est.get_state().position, before, atol=1e-9)
    a_offset = est.sources["a"].offset.copy()
    est.switch_source("a")
    assert est.active_source == "a"
    assert np.array_equal(est.sources["a"].offset, a_offset)


def test_level_heading_rotation():
    est = started(heading=0.3)
    assert np.allclose(est.get_state().rotation, rot_z(0.3), atol=1e-12)


ops = st.lists(
    st.one_of(
        st.tuples(st.just("p"), st.floats(-3, 3), st.floats(0.001, 0.5)),
        st.tuples(st.just("c"), st.floats(-2, 2), st.floats(0.01, 2.0)),
    ),
    min_size=1, max_size=60,
)


@given(ops)
def test_covariance_symmetric_psd(seq):
    est = started(0.3)
    for op, a, b in seq:
        if op == "p":
            est.predict(vec3(a, -a, 0.5 * a), a, b)
        else:
            est.correct("a", est.x[:, 0] + a, est.heading + 0.1 * a, sigma_position=b)
        assert np.allclose(est.P, np.transpose(est.P, (0, 2, 1)), atol=0.0)
        assert np.linalg.eigvalsh(est.P).min() >= -1e-12
        assert est.heading_var >= 0.0


def test_single_source_is_unbiased():
    errs = []
    truth = vec3(2.0, -1.0, 3.0)
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        est = StateEstimator()
        est.register_source("a", 0.5)
        for _ in range(20):
            est.correct("a", truth + rng.normal(0.0, 0.5, 3), 0.0)
            est.predict(vec3(), 0.0, 0.1)
        errs.append(est.x[:, 0] - truth)
    errs = np.array(errs)
    se = errs.std(axis=0) / math.sqrt(len(errs))
    assert np.all(np.abs(errs.mean(axis=0)) < 3 * se)
