"""Acceptance criteria 1-14; each test prints one pass/fail line (see the terminal summary)."""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from mrs_microstack.control import compute, select_profile
from mrs_microstack.core import G0, FullStateReference, ReferenceCommand, UavState, rot_z, vec3
from mrs_microstack.estimation import StateEstimator
from mrs_microstack.missions import FlockingParams
from mrs_microstack.netsim import Backpressure, ChannelConfig, Network, preset
from mrs_microstack.plant import (
    AttitudeRateLoop,
    ImuConfig,
    Multirotor,
    OdometrySource,
    default_source,
    params_from_platform,
    quad_x,
    sample_imu,
)
from mrs_microstack.propulsion import (
    DUCTED_FAN,
    DUCTED_WITH_DUCTING,
    apply_modifier,
    hover_analysis,
    load_curve,
    load_platform,
    validate_curve,
)
from mrs_microstack.scenario import bundled_scenarios, load_scenario
from mrs_microstack.sim import run
from mrs_microstack.swarm import AgentSpec, circle_agents, run_swarm, unobstructed_time
from mrs_microstack.tracking import (
    TICK,
    AvoidanceConfig,
    MpcTracker,
    TrackerBank,
    TrackerConstraints,
    encoded_size,
)
from mrs_microstack.uvdar import Decoder, SequenceSetParams, encode, generate_set


def test_01_table_reproduction(acceptance):
    t0 = time.perf_counter()
    curves = [load_curve("9450"), load_curve("8045")]
    valid = all(validate_curve(c) == [] for c in curves)
    p_err = max(float(np.max(np.abs(c.power - c.printed_power) / c.printed_power)) for c in curves)
    e_err = max(float(np.max(np.abs(c.efficiency - c.printed_efficiency) / c.printed_efficiency))
                for c in curves)
    rows = sum(len(c) for c in curves)
    dt = time.perf_counter() - t0
    ok = valid and rows == 12 and p_err <= 0.005 and e_err <= 0.03 and dt < 1.0
    acceptance(1, ok, f"{rows} rows valid={valid}, power err {p_err:.2%}, efficiency err {e_err:.2%}, {dt:.3f} s")
    assert ok


def test_02_propeller_comparison(acceptance):
    a, b = load_curve("9450"), load_curve("8045")
    common = sorted(set(a.throttle.tolist()) & set(b.throttle.tolist()))
    ia = [a.throttle.tolist().index(t) for t in common]
    ib = [b.throttle.tolist().index(t) for t in common]
    thrust = all(a.thrust[i] > b.thrust[j] for i, j in zip(ia, ib))
    eff = all(a.efficiency[i] > b.efficiency[j] for i, j in zip(ia, ib))
    ok = len(common) > 0 and thrust and eff
    acceptance(2, ok, f"{len(common)} common throttles, 9450 > 8045 thrust={thrust} efficiency={eff}")
    assert ok


def test_03_duct_modifiers(acceptance):
    c = load_curve("9450")
    d_thrust = float(np.max(np.abs(apply_modifier(c, DUCTED_WITH_DUCTING).thrust - 0.80 * c.thrust)))
    d_current = float(np.max(np.abs(apply_modifier(c, DUCTED_FAN).current - 0.95 * c.current)))
    ok = d_thrust <= 1e-9 and d_current <= 1e-9
    acceptance(3, ok, f"thrust x0.80 dev {d_thrust:.1e}, current x0.95 dev {d_current:.1e}")
    assert ok


def test_04_endurance(acceptance):
    spec, c = load_platform("f450"), load_curve("9450")
    payloads = np.linspace(0.0, 0.5, 11)
    end = np.array([hover_analysis(spec, c, p).endurance for p in payloads])
    in_band = bool(np.all((end >= 10.0) & (end <= 15.0)))
    decreasing = bool(np.all(np.diff(end) < 0))
    ok = (in_band and decreasing and spec.takeoff_mass == pytest.approx(1.7)
          and spec.battery_capacity == pytest.approx(99.9))
    acceptance(4, ok, f"F450 endurance {end[0]:.2f} .. {end[-1]:.2f} min, strictly decreasing={decreasing}")
    assert ok


def test_05_tracker_feasibility_fuzz(acceptance):
    c = TrackerConstraints()
    vlim = np.array([c.v_max_h, c.v_max_h, c.v_max_v])
    alim = np.array([c.a_max_h, c.a_max_h, c.a_max_v])
    rows, steps = 1000, 400
    viol = cont = 0
    t0 = time.perf_counter()
    for chunk in range(10):
        rng = np.random.default_rng(chunk)
        bank = TrackerBank(rng.uniform(-5, 5, (rows, 3)), rng.uniform(-math.pi, math.pi, rows), c)
        changes = {0, *rng.choice(np.arange(20, 300), 3, replace=False).tolist()}
        prev = bank.position.copy()
        for k in range(steps):
            if k in changes:
                jump = rng.uniform(-20, 20, (rows, 3)) * (rng.random((rows, 1)) < 0.7)
                bank.set_references(bank.position + jump, rng.uniform(-math.pi, math.pi, rows))
            bank.step()
            viol += int(np.count_nonzero(np.abs(bank.velocity) > vlim + 1e-6))
            viol += int(np.count_nonzero(np.abs(bank.acceleration) > alim + 1e-6))
            viol += int(np.count_nonzero(np.abs(bank.heading_rate) > c.heading_rate_max + 1e-6))
            step = bank.position - prev
            prev = bank.position.copy()
            cont += int(np.count_nonzero(np.hypot(step[:, 0], step[:, 1]) > c.v_max_h * TICK + 1e-6))
            cont += int(np.count_nonzero(np.abs(step[:, 2]) > c.v_max_v * TICK + 1e-6))
    dt = time.perf_counter() - t0
    ok = viol == 0 and cont == 0 and dt < 120.0
    acceptance(5, ok, f"10000 sequences x {steps} ticks: {viol} limit violations, {cont} continuity breaks, "
                      f"{dt:.1f} s")
    assert ok


def test_06_step_response(acceptance):
    c = TrackerConstraints()
    tr = MpcTracker(c)
    tr.update(UavState(position=vec3()), 0.0)
    tr.set_reference(ReferenceCommand(vec3(10.0, 0.0, 0.0), 0.0))
    reached = None
    for k in range(1, 2001):
        o = tr.update(None, k * TICK)
        if abs(o.position[0] - 10.0) < 0.05:
            reached = k * TICK
            break
    oracle = 10.0 / c.v_max_h + c.v_max_h / c.a_max_h
    ok = reached is not None and 5.0 <= reached <= 7.5
    acceptance(6, ok, f"10 m step within 0.05 m at {reached} s (bang-bang oracle {oracle:.2f} s)")
    assert ok


def test_07_collision_avoidance(acceptance):
    c, av = TrackerConstraints(), AvoidanceConfig()
    t0 = time.perf_counter()
    lines, ok = [], True
    for n in (2, 3, 5):
        agents = circle_agents(n)
        limit = 3.0 * unobstructed_time(agents[0], c)
        on = run_swarm(agents, 60.0, c, av, preset("highband", loss_probability=0.0), seed=1,
                       stop_when_reached=True)
        off = run_swarm(agents, 60.0, c, AvoidanceConfig(enabled=False), preset("highband", loss_probability=0.0),
                        seed=1, stop_when_reached=True)
        lossy = run_swarm(agents, 60.0, c, av, preset("lowband", loss_probability=0.3), seed=1,
                          broadcast_budget=1.0, stop_when_reached=True)
        m = min(len(on.references[0]), len(off.references[0]))
        same = on.references[0][:m] == off.references[0][:m]
        reach = max(r if r is not None else math.inf for r in on.reached)
        good = (on.min_separation >= av.r_min and reach <= limit and same
                and lossy.min_separation >= av.r_min)
        ok &= good
        lines.append(f"N={n} sep {on.min_separation:.2f}/{lossy.min_separation:.2f} m, "
                     f"reach {reach:.1f}/{limit:.1f} s, top trace same={same}")
    dt = time.perf_counter() - t0
    ok &= dt < 120.0
    acceptance(7, ok, "; ".join(lines) + f"; {dt:.1f} s")
    assert ok


X500 = params_from_platform(load_platform("x500"), load_curve("9450"))


def _closed_loop_step(profile: str) -> float:
    gains = select_profile(profile)
    uav = Multirotor.hovering(X500, UavState(position=vec3(0.0, 0.0, 2.0)))
    loop = AttitudeRateLoop(X500)
    ref = FullStateReference(vec3(10.0, 0.0, 2.0), vec3(), vec3(), 0.0, 0.0)
    for _ in range(2000):
        out = compute(ref, uav.state, gains, X500.mass, X500.rotor_count * X500.rotor_max_thrust)
        for _ in range(10):
            uav.step(loop.step(uav.state, out.command, 0.001), 0.001)
    return float(np.linalg.norm(uav.state.position - vec3(10.0, 0.0, 2.0)))


def test_08_controller_equilibrium(acceptance):
    hover = FullStateReference(vec3(0.0, 0.0, 2.0), vec3(), vec3(), 0.0, 0.0)
    out = compute(hover, UavState(position=vec3(0.0, 0.0, 2.0)), select_profile("smooth"), X500.mass)
    t_err = abs(out.command.thrust - X500.mass * G0)
    w = float(np.max(np.abs(out.command.body_rate_setpoint)))
    errs = {p: _closed_loop_step(p) for p in ("smooth", "aggressive")}
    ok = t_err <= 1e-9 and w == 0.0 and all(e < 0.01 for e in errs.values())
    acceptance(8, ok, f"hover thrust err {t_err:.1e} N, |w| {w}, step error at 20 s "
                      + ", ".join(f"{p} {e * 1000:.2f} mm" for p, e in errs.items()))
    assert ok


def _brute_force(length, mor):
    classes = set()
    for bits in itertools.product((0, 1), repeat=length):
        if not any(bits):
            continue
        run = max(len(r) for r in "".join(map(str, bits + bits)).split("1"))
        if min(run, length) <= mor:
            classes.add(min(bits[k:] + bits[:k] for k in range(length)))
    return sorted(classes)


def test_09_uvdar_sets(acceptance):
    t0 = time.perf_counter()
    sets_ok = all(generate_set(SequenceSetParams(n, k)) == _brute_force(n, k)
                  for n in range(2, 13) for k in range(1, n))
    n4 = len(generate_set(SequenceSetParams(4, 3)))
    n3 = len(generate_set(SequenceSetParams(3, 1)))
    decode_ok = True
    for n in range(2, 11):
        for k in range(1, n):
            members = generate_set(SequenceSetParams(n, k))
            dec = Decoder(members)
            decode_ok &= all(dec([int(encode(m, s + f)) for f in range(n)]) == i
                             for i, m in enumerate(members) for s in range(n))
    dt = time.perf_counter() - t0
    ok = sets_ok and n4 == 5 and n3 == 2 and decode_ok and dt < 30.0
    acceptance(9, ok, f"sets match oracle L<=12: {sets_ok}, |L4|={n4}, |L3,1|={n3}, decode L<=10: {decode_ok}, "
                      f"{dt:.1f} s")
    assert ok


def _truth(t):
    w, r = 0.2, 5.0
    p = vec3(r * math.cos(w * t), r * math.sin(w * t), 2 + 0.5 * math.sin(0.5 * t))
    v = vec3(-r * w * math.sin(w * t), r * w * math.cos(w * t), 0.25 * math.cos(0.5 * t))
    a = vec3(-r * w * w * math.cos(w * t), -r * w * w * math.sin(w * t), -0.125 * math.sin(0.5 * t))
    return p, v, a, 0.2 * t


def _fusion_flight(seed, use, switch_every=None):
    """Circle flight with noisy acceleration feed; returns (rmse, max switch jump, min eigenvalue)."""
    rng = np.random.default_rng(seed)
    cfgs = {"a": default_source("a", "gnss", position_noise_sigma=0.3),
            "b": default_source("b", "slam", position_noise_sigma=0.3)}
    srcs = {k: OdometrySource(c, np.random.default_rng([seed, i])) for i, (k, c) in enumerate(cfgs.items())}
    est = StateEstimator()
    for k in use:
        est.register_source(k, cfgs[k].position_noise_sigma, cfgs[k].heading_noise_sigma)
    err, jump, eig = [], 0.0, math.inf
    for n in range(6001):
        t = n * 0.01
        p, v, a, h = _truth(t)
        if n > 0:
            est.predict(a + rng.normal(0.0, 0.2, 3), 0.2, 0.01)
        st = UavState(p, v, rot_z(h))
        for k in use:
            for m in srcs[k].tick(st, t):
                est.correct(k, m.position, m.heading, now=t, stamp=m.stamp)
        if not est.initialized:
            continue
        eig = min(eig, float(np.linalg.eigvalsh(est.P).min()))
        if not np.array_equal(est.P, np.transpose(est.P, (0, 2, 1))):
            eig = -math.inf
        if switch_every and n % switch_every == 0 and len(use) > 1:
            before = est.get_state().position
            est.switch_source(use[(n // switch_every) % len(use)])
            jump = max(jump, float(np.linalg.norm(est.get_state().position - before)))
        if t >= 5.0:
            err.append(est.get_state().position - p)
    e = np.array(err)
    return math.sqrt((e ** 2).sum(1).mean()), jump, eig


def test_10_estimator_fusion(acceptance):
    wins, worst_ratio, jump, eig = 0, 0.0, 0.0, math.inf
    for seed in range(20):
        fused, j, e = _fusion_flight(seed, ["a", "b"], switch_every=500)
        best = min(_fusion_flight(seed, ["a"])[0], _fusion_flight(seed, ["b"])[0])
        wins += fused < best
        worst_ratio = max(worst_ratio, fused / best)
        jump, eig = max(jump, j), min(eig, e)
    ok = wins == 20 and jump <= 1e-6 and eig >= -1e-12
    acceptance(10, ok, f"fused < best single on {wins}/20 seeds (worst ratio {worst_ratio:.2f}), "
                       f"max switch jump {jump:.1e} m, min eigenvalue {eig:.1e}")
    assert ok


def test_11_imu_spectrum(acceptance):
    quad = quad_x(2.0, 0.25, 10.0)
    cfg = ImuConfig()
    thrusts = np.full(4, quad.hover_thrust / 4)

    def spectrum(damped):
        rng = np.random.default_rng(0)
        x = np.array([sample_imu(UavState(), thrusts, k / cfg.sample_rate, cfg, damped, quad, rng).accel[0]
                      for k in range(1024)])
        return np.fft.rfftfreq(len(x), 1.0 / cfg.sample_rate), np.abs(np.fft.rfft(x * np.hanning(len(x))))

    freqs, mag = spectrum(False)
    _, dmag = spectrum(True)
    f1 = cfg.vibration.rotor_frequency
    target = cfg.damping_attenuation
    ok, parts = True, []
    for f0 in (f1, 2.0 * f1):
        k = int(np.argmin(np.abs(freqs - f0)))
        peak, dpeak = mag[k - 1:k + 2].max(), dmag[k - 1:k + 2].max()
        floor = np.median(np.r_[mag[k - 30:k - 5], mag[k + 6:k + 31]])
        ratio = dpeak / peak
        ok &= peak >= 10.0 * floor and abs(ratio - target) <= 0.1 * target
        parts.append(f"{f0:.0f} Hz peak/floor {peak / floor:.0f}, damped ratio {ratio:.3f}")
    acceptance(11, ok, "; ".join(parts) + f" (configured {target})")
    assert ok


def test_12_network_accounting(acceptance):
    rng = np.random.default_rng(4)
    net = Network(4)
    chans = [ChannelConfig("mid", bandwidth=5000.0, latency=0.05, loss_probability=0.2, mtu=512),
             preset("highband")]
    origins = [f"uav{i}" for i in range(5)]
    for c in chans:
        net.add_channel(c)
        for o in origins:
            net.expose_topic(o, f"{c.name}/{o}", c.name)
            net.subscribe("gcs", f"{c.name}/{o}")
    accepted, rejected = [], 0
    for t in np.sort(rng.uniform(0.0, 100.0, 10_000)):
        net.advance_to(float(t))
        c = chans[int(rng.integers(2))]
        o = origins[int(rng.integers(5))]
        size = int(rng.integers(1, c.mtu + 1)) if c.name == "mid" else int(rng.integers(1, 2000))
        try:
            accepted.append((c, net.publish(o, f"{c.name}/{o}", bytes(size))))
        except Backpressure:
            rejected += 1
    while net.in_flight():
        net.step(0.01)
    conserve = True
    for c in chans:
        st = net.stats[c.name]
        sent_bytes = sum(len(m.payload) for ch, m in accepted if ch is c)
        got = {d.message.seq: len(d.message.payload) for d in net.trace if d.message.topic.startswith(c.name)}
        conserve &= st.sent == st.delivered + st.lost + st.in_flight() and st.in_flight() == 0
        conserve &= st.bytes_sent == sent_bytes and st.bytes_delivered == sum(got.values())
    window = True
    for c in chans:
        for o in origins:
            done = np.array(sorted((d.time - c.latency, len(d.message.payload)) for d in net.trace
                                   if d.message.origin == o and d.message.topic.startswith(c.name)))
            for horizon in np.linspace(0.5, 120.0, 60):
                window &= done[done[:, 0] <= horizon + 1e-9, 1].sum() <= c.bandwidth * horizon + c.mtu
    low, high = preset("lowband"), preset("highband")
    n = encoded_size(40)
    ok = (len(accepted) + rejected == 10_000 and conserve and window
          and low.serialization_time(n) >= 4.97 and high.serialization_time(n) < 1e-3)
    acceptance(12, ok, f"{len(accepted)} accepted / {rejected} backpressured, conservation={conserve}, "
                       f"bandwidth window={window}, {n} B record: lowband {low.serialization_time(n):.2f} s, "
                       f"highband {high.serialization_time(n) * 1e3:.3f} ms")
    assert ok


def _flock(seed):
    rng = np.random.default_rng(seed)
    while True:
        starts = rng.uniform(0, 20, (5, 3))
        starts[:, 2] = rng.uniform(2, 22, 5)
        d = np.linalg.norm(starts[:, None] - starts[None], axis=2)[np.triu_indices(5, 1)]
        if d.min() > 2:
            break
    return starts, rng.uniform(-math.pi, math.pi, 5)


def test_13_flocking(acceptance):
    fp = FlockingParams()
    lo, hi = math.inf, 0.0
    for seed in range(10):
        starts, hd = _flock(seed)
        r = run_swarm([AgentSpec(i, i, starts[i], None, hd[i]) for i in range(5)], 120.0, flocking=fp, seed=seed)
        last = r.pairwise_distances()[:, r.times >= 90.0]
        lo, hi = min(lo, float(last.min())), max(hi, float(last.max()))
    in_band = lo >= 0.5 * fp.desired_distance and hi <= 3.0 * fp.desired_distance
    starts, hd = _flock(3)
    rz, off = rot_z(math.pi / 2), vec3(13.5, -4.25, 3.0)
    a = run_swarm([AgentSpec(i, i, starts[i], None, hd[i]) for i in range(5)], 120.0, flocking=fp, seed=3)
    b = run_swarm([AgentSpec(i, i, rz @ starts[i] + off, None, hd[i] + math.pi / 2) for i in range(5)], 120.0,
                  flocking=fp, seed=3)
    ca, cb = np.array(a.commands), np.array(b.commands)
    dev = float(np.abs(np.einsum("ij,nkj->nki", rz, ca[:, :, 1:]) + off - cb[:, :, 1:]).max())
    ok = in_band and dev < 0.01
    acceptance(13, ok, f"final-30 s distances [{lo:.2f}, {hi:.2f}] m vs [{0.5 * fp.desired_distance:g}, "
                       f"{3 * fp.desired_distance:g}], rigid-transform command deviation {dev:.1e} m")
    assert ok


def test_14_determinism(acceptance, tmp_path):
    same = {}
    for name in bundled_scenarios():
        sc = load_scenario(name)
        run(sc, tmp_path / name / "a")
        run(sc, tmp_path / name / "b")
        files = sorted(p.name for p in (tmp_path / name / "a").iterdir())
        same[name] = bool(files) and all(
            (tmp_path / name / "a" / f).read_bytes() == (tmp_path / name / "b" / f).read_bytes() for f in files)
    ok = all(same.values())
    acceptance(14, ok, ", ".join(f"{k} identical={v}" for k, v in same.items()))
    assert ok
