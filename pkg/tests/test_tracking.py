from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from mrs_microstack.core import ReferenceCommand, UavState, rot_z, vec3, wrap_heading
from mrs_microstack.swarm import circle_agents, run_swarm
from mrs_microstack.tracking import (
    HORIZON,
    MPC_STEP,
    TICK,
    AvoidanceConfig,
    MpcTracker,
    NotInitialized,
    PredictedTrajectory,
    TrackerConstraints,
    encoded_size,
    govern3,
    shaped_limits,
)

C = TrackerConstraints()
VLIM = np.array([C.v_max_h, C.v_max_h, C.v_max_v])
ALIM = np.array([C.a_max_h, C.a_max_h, C.a_max_v])


def tracker(pos=(0.0, 0.0, 2.0), heading=0.0, constraints=C, **kw):
    tr = MpcTracker(constraints, **kw)
    tr.update(UavState(position=np.array(pos, dtype=float), rotation=rot_z(heading)), 0.0)
    return tr


def check_sample(o, prev, c=C):
    v = np.array([c.v_max_h, c.v_max_h, c.v_max_v])
    a = np.array([c.a_max_h, c.a_max_h, c.a_max_v])
    assert np.all(np.abs(o.velocity) <= v + 1e-6)
    assert np.all(np.abs(o.acceleration) <= a + 1e-6)
    assert abs(o.heading_rate) <= c.heading_rate_max + 1e-6
    if prev is not None:
        step = o.position - prev.position
        assert math.hypot(step[0], step[1]) <= c.v_max_h * TICK + 1e-6
        assert abs(step[2]) <= c.v_max_v * TICK + 1e-6


def bang_bang_time(d, v, a):
    """Rest-to-rest time of the velocity/acceleration-limited double integrator."""
    return d / v + v / a if d >= v * v / a else 2.0 * math.sqrt(d / a)


def test_requires_initial_estimate():
    with pytest.raises(NotInitialized):
        MpcTracker().update(None, 0.0)


def test_reference_at_current_state_holds():
    tr = tracker((1.0, 2.0, 3.0), 0.5)
    tr.set_reference(ReferenceCommand(vec3(1.0, 2.0, 3.0), 0.5))
    for k in range(1, 301):
        o = tr.update(None, k * TICK)
        assert np.allclose(o.position, [1.0, 2.0, 3.0], atol=1e-9)
        assert np.allclose(o.velocity, 0.0, atol=1e-9) and np.allclose(o.acceleration, 0.0, atol=1e-9)
        assert o.heading == pytest.approx(0.5, abs=1e-9)


def test_reference_ahead_accelerates_toward_it():
    tr = tracker()
    tr.set_reference(ReferenceCommand(vec3(10.0, 0.0, 2.0), 0.0))
    o = tr.update(None, TICK)
    assert o.acceleration[0] > 0.0
    assert o.acceleration[1] == 0.0 and o.acceleration[2] == 0.0


def test_overwrite_mid_flight_is_continuous():
    tr = tracker()
    tr.set_reference(ReferenceCommand(vec3(10.0, 0.0, 2.0), 0.0))
    prev = None
    for k in range(1, 801):
        if k == 250:
            tr.set_reference(ReferenceCommand(vec3(-5.0, 8.0, 4.0), 2.0))
        o = tr.update(None, k * TICK)
        check_sample(o, prev)
        if prev is not None:
            assert np.all(np.abs(o.velocity - prev.velocity) <= ALIM * TICK + 1e-9)
        prev = o


def test_step_response_within_bang_bang_bounds():
    c = TrackerConstraints(v_max_h=2.0, a_max_h=4.0, j_max=20.0)
    tr = tracker((0.0, 0.0, 0.0), constraints=c)
    tr.set_reference(ReferenceCommand(vec3(10.0, 0.0, 0.0), 0.0))
    reached = None
    for k in range(1, 1201):
        o = tr.update(None, k * TICK)
        if reached is None and abs(o.position[0] - 10.0) < 0.05:
            reached = k * TICK
    assert 5.0 <= reached <= 7.5


def test_random_walk_chase_respects_limits():
    rng = np.random.default_rng(7)
    tr = tracker()
    target = vec3(0.0, 0.0, 2.0)
    prev = None
    for k in range(1, 6001):
        if rng.random() < 0.01:
            target = target + rng.normal(0.0, 4.0, 3)
            tr.set_reference(ReferenceCommand(target, rng.uniform(-math.pi, math.pi)))
        o = tr.update(None, k * TICK)
        check_sample(o, prev)
        prev = o


def test_heading_takes_short_way_round():
    tr = tracker(heading=3.0)
    tr.set_reference(ReferenceCommand(vec3(0.0, 0.0, 2.0), -3.0))
    for k in range(1, 501):
        o = tr.update(None, k * TICK)
        assert o.heading_rate >= -1e-9
    assert abs(wrap_heading(o.heading + 3.0)) < 0.01


def test_predicted_trajectory_while_hovering():
    tr = tracker((1.0, -1.0, 2.0))
    pt = tr.predicted_trajectory()
    assert pt.points.shape == (HORIZON, 3)
    assert pt.dt == MPC_STEP
    assert np.allclose(pt.points, [1.0, -1.0, 2.0], atol=1e-9)


def test_predicted_trajectory_mid_transit_is_monotone():
    tr = tracker((0.0, 0.0, 2.0))
    tr.set_reference(ReferenceCommand(vec3(12.0, 0.0, 2.0), 0.0))
    for k in range(1, 151):
        tr.update(None, k * TICK)
    x = tr.predicted_trajectory().points[:, 0]
    assert np.all(np.diff(x) >= -1e-6)
    assert x[-1] <= 12.0 + 0.05


def test_trajectory_wire_format():
    tr = tracker((1.0, 2.0, 3.0))
    pt = tr.predicted_trajectory()
    data = pt.encode()
    assert len(data) == encoded_size(HORIZON) == 497
    back = PredictedTrajectory.decode(data)
    assert back.uav_id == pt.uav_id and back.start_time == pt.start_time
    assert np.allclose(back.points, pt.points, atol=1e-6)
    with pytest.raises(ValueError):
        PredictedTrajectory.decode(data[:-1])


def test_decimation_keeps_endpoints_and_fits():
    pts = np.column_stack((np.arange(40.0), np.zeros(40), np.zeros(40)))
    d = PredictedTrajectory(1, 0, 0.0, 0.2, pts).decimated(6)
    assert len(d.points) <= 6
    assert d.points[0, 0] == 0.0
    assert d.position_at(np.array([d.end_time]))[0, 0] == pytest.approx(d.points[-1, 0])


def test_distant_neighbour_has_no_effect():
    cfg = AvoidanceConfig()
    a = tracker(uav_id=1, priority=1, avoidance=cfg)
    b = tracker(uav_id=1, priority=1, avoidance=cfg)
    for tr in (a, b):
        tr.set_reference(ReferenceCommand(vec3(10.0, 0.0, 2.0), 0.0))
    far = PredictedTrajectory(0, 0, 0.0, MPC_STEP, np.tile([0.0, 60.0, 2.0], (HORIZON, 1)))
    for k in range(1, 301):
        if k % 20 == 1:
            a.incorporate_neighbor(PredictedTrajectory(0, 0, (k - 1) * TICK, MPC_STEP, far.points))
        oa, ob = a.update(None, k * TICK), b.update(None, k * TICK)
        assert oa.as_row() == ob.as_row()
    assert a.status.activations == 0


@pytest.fixture(scope="module")
def headon():
    cfg = AvoidanceConfig()
    on = run_swarm(circle_agents(2), 30.0, C, cfg)
    off = run_swarm(circle_agents(2), 30.0, C, AvoidanceConfig(enabled=False))
    return cfg, on, off


def test_headon_lower_priority_climbs(headon):
    cfg, on, _ = headon
    z = on.positions[1, :, 2]
    assert z.max() == pytest.approx(2.0 + cfg.altitude_offset, abs=0.05)
    assert np.all(on.positions[0, :, 2] == 2.0)
    assert on.min_separation >= cfg.r_min
    assert all(r is not None for r in on.reached)


def test_headon_higher_priority_trace_unchanged(headon):
    _, on, off = headon
    assert on.references[0] == off.references[0]
    assert off.min_separation < 1.5


@settings(max_examples=12)
@given(st.lists(st.tuples(st.integers(1, 200),
                          st.tuples(st.floats(-30, 30), st.floats(-30, 30), st.floats(-10, 10)),
                          st.floats(-10, 10)), min_size=1, max_size=6))
def test_fuzzed_references_feasible_and_continuous(changes):
    tr = tracker()
    schedule = {}
    k = 0
    for gap, p, h in changes:
        k += gap
        schedule[k] = ReferenceCommand(vec3(*p), h)
    prev = None
    for k in range(1, max(schedule) + 200):
        if k in schedule:
            tr.set_reference(schedule[k])
        o = tr.update(None, k * TICK)
        check_sample(o, prev)
        prev = o


@settings(max_examples=40)
@example((0.1, 0.0, 0.0))
@example((0.3, -0.3, 0.1))
@given(st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(-8, 8)).filter(
    lambda d: np.linalg.norm(d) > 0.05))
def test_converges_within_bang_bang_bound(d):
    d = np.array(d)
    h = math.hypot(d[0], d[1])
    bound = max(bang_bang_time(h, C.v_max_h, C.a_max_h), bang_bang_time(abs(d[2]), C.v_max_v, C.a_max_v))
    tr = tracker((0.0, 0.0, 0.0))
    tr.set_reference(ReferenceCommand(d, 0.0))
    steps = int(math.ceil(1.5 * bound / TICK))
    for k in range(1, steps + 1):
        o = tr.update(None, k * TICK)
    assert np.linalg.norm(o.position - d) < 0.05


def test_deterministic():
    def run():
        tr = tracker()
        tr.set_reference(ReferenceCommand(vec3(7.0, -3.0, 5.0), 1.0))
        return [tr.update(None, k * TICK).as_row() for k in range(1, 500)]
    assert run() == run()


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-20, 20))
def test_governor_keeps_state_admissible(v, a, j_des, dummy):
    vmax, amax, jmax = np.array([2.0]), np.array([2.0]), np.array([10.0])
    v = np.clip(np.array([v]), -2.0, 2.0)
    a = np.clip(np.array([a]), -2.0, 2.0)
    env = np.abs(v + a * np.abs(a) / (2.0 * jmax))
    if env[0] > 2.0:
        return  # start outside the braking envelope; not an admissible state
    p = np.zeros(1)
    for _ in range(300):
        p, v, a, j, bad = govern3(p, v, a, np.array([j_des * dummy]), vmax, amax, jmax)
        assert abs(v[0]) <= 2.0 + 1e-9 and abs(a[0]) <= 2.0 + 1e-9 and abs(j[0]) <= 10.0 + 1e-9
        assert not bad[0]


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_shaped_limits_never_exceed_configured(dx, dy):
    lim = shaped_limits(C, np.array([[dx, dy, 0.0]]))[0]
    assert np.all(lim[:2, 1] <= C.v_max_h + 1e-12) and np.all(lim[:2, 2] <= C.a_max_h + 1e-12)
    assert np.hypot(*lim[:2, 1]) == pytest.approx(C.v_max_h)
