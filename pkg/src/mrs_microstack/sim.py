"""Full-pipeline scenario runs: plant and rate loop at 1 kHz, everything else at 100 Hz."""

from __future__ import annotations

import io
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import DegenerateForce, compute, select_profile
from .core import FullStateReference, ReferenceCommand, UavState, rot_z, rotation_to_quaternion
from .estimation import StateEstimator
from .missions import Flocker, GroundStation, Mission, MissionEndpoint, MissionStatus, mission_step
from .netsim import Network, max_points_for
from .plant import AttitudeRateLoop, Multirotor, OdometrySource, params_from_platform
from .propulsion import MODIFIERS, apply_modifier, load_curve, load_platform
from .scenario import Scenario, UavConfig
from .tracking import TICK, MpcTracker, PredictedTrajectory
from .uvdar import Decoder, NotVisible, SequenceSetParams, generate_set, observe_any, ring_cameras

log = logging.getLogger(__name__)

LOG_VERSION = 1
REPORT_VERSION = 1
PLANT_SUBSTEPS = 10  # 1 kHz inside each 100 Hz tick
FLOCK_STRIDE = 10  # flocking and UVDAR at 10 Hz


class SimulationPanic(RuntimeError):
    def __init__(self, tick: int, t: float, uav_id: int | None, cause: Exception):
        self.tick, self.t, self.uav_id, self.cause = tick, t, uav_id, cause
        who = f" uav {uav_id}" if uav_id is not None else ""
        super().__init__(f"tick {tick} (t={t:.2f} s){who}: {type(cause).__name__}: {cause}")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named per-subsystem random stream derived from the root seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def log_columns(rotor_count: int) -> list[str]:
    cols = ["tick", "t", "x", "y", "z", "qw", "qx", "qy", "qz",
            "est_x", "est_y", "est_z", "est_qw", "est_qx", "est_qy", "est_qz",
            "ref_x", "ref_y", "ref_z", "ref_vx", "ref_vy", "ref_vz", "ref_ax", "ref_ay", "ref_az",
            "ref_heading", "ref_heading_rate", "thrust_d", "wx_d", "wy_d", "wz_d"]
    return cols + [f"f{i}" for i in range(rotor_count)]


@dataclass
class UavReport:
    uav_id: int
    waypoint_errors: list[float]
    estimate_rmse: float
    mission_status: str


@dataclass
class RunReport:
    scenario: str
    seed: int
    ticks: int
    min_separation: float
    uavs: list[UavReport]
    channels: dict[str, dict[str, int]]
    wall_time: float = 0.0
    logs: dict[int, Path] = field(default_factory=dict)

    def counts_consistent(self) -> bool:
        return all(c["sent"] == c["delivered"] + c["lost"] + c["in_flight"] for c in self.channels.values())

    def below(self, r_min: float) -> bool:
        return self.min_separation < r_min

    def to_text(self) -> str:
        """Plain-text report; wall time is left out so reruns are byte-identical."""
        out = [f"# mrs_microstack run report v{REPORT_VERSION}",
               f"scenario {self.scenario}", f"seed {self.seed}", f"ticks {self.ticks}",
               f"min_separation {self.min_separation!r}"]
        for u in self.uavs:
            errs = " ".join(repr(e) for e in u.waypoint_errors) or "-"
            out.append(f"uav {u.uav_id} status {u.mission_status} estimate_rmse {u.estimate_rmse!r} "
                       f"waypoint_errors {errs}")
        for name, c in self.channels.items():
            out.append(f"channel {name} sent {c['sent']} delivered {c['delivered']} lost {c['lost']} "
                       f"in_flight {c['in_flight']}")
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    return repr(float(v))


class _Vehicle:
    def __init__(self, cfg: UavConfig, sc: Scenario, net: Network, members, index: int):
        self.cfg = cfg
        self.node = f"uav{cfg.uav_id}"
        curve = load_curve(cfg.curve)
        for m in cfg.modifiers:
            curve = apply_modifier(curve, MODIFIERS[m])
        self.params = params_from_platform(load_platform(cfg.platform), curve, cfg.payload)
        self.max_thrust = self.params.rotor_count * self.params.rotor_max_thrust
        st = UavState(position=cfg.start.copy(), rotation=rot_z(cfg.heading))
        self.airborne_start = cfg.start[2] > sc.ground_z + 1e-6
        if self.airborne_start:
            self.plant = Multirotor.hovering(self.params, st, ground_z=sc.ground_z)
        else:
            self.plant = Multirotor(self.params, st, ground_z=sc.ground_z)
        self.loop = AttitudeRateLoop(self.params)
        self.gains = select_profile(cfg.profile)
        self.estimator = StateEstimator()
        self.sources = []
        for s in cfg.sources:
            self.estimator.register_source(s.name, max(s.position_noise_sigma, 1e-3), max(s.heading_noise_sigma, 1e-3))
            self.sources.append(OdometrySource(s, stream(sc.seed, f"odometry/{cfg.uav_id}/{s.name}")))
        self.tracker = MpcTracker(cfg.constraints, cfg.uav_id, cfg.priority, sc.avoidance)
        self.endpoint = MissionEndpoint(net, cfg.uav_id, sc.mission_channel, lambda: self.plant.state.position)
        self.flocker = Flocker(sc.flocking) if cfg.flocking else None
        self.member = members[index] if members else None
        self.uv_rng = stream(sc.seed, f"uvdar/{cfg.uav_id}")
        self.cameras = ring_cameras(cfg.uvdar.cameras, vertical=True)
        self.active = self.airborne_start  # motors running
        self.command: ReferenceCommand | None = None
        self.last_ref: FullStateReference | None = None
        self.err_sq, self.err_n = 0.0, 0

    @property
    def mission(self) -> Mission | None:
        return self.endpoint.mission


class Simulation:
    def __init__(self, scenario: Scenario, out_dir: str | Path | None = None):
        self.sc = scenario
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.net = Network(stream(scenario.seed, "netsim"))
        for ch in scenario.channels:
            self.net.add_channel(ch)
        flock = [u for u in scenario.uavs if u.flocking]
        members = None
        if flock:
            p = SequenceSetParams(flock[0].uvdar.length, flock[0].uvdar.max_off_run)
            members = generate_set(p)
            self.decoder = Decoder(members)
        # sequence ids are handed out in uav id order
        index = {uid: i for i, uid in enumerate(sorted(u.uav_id for u in scenario.uavs))}
        self.vehicles = [_Vehicle(u, scenario, self.net, members, index[u.uav_id]) for u in scenario.uavs]
        self.by_member = {i: uid for uid, i in index.items()}
        self.gcs = GroundStation(self.net, scenario.mission_channel)
        traj = scenario.trajectory_channel
        for v in self.vehicles:
            self.net.expose_topic(v.node, f"trajectory/{v.cfg.uav_id}", traj)
        for v in self.vehicles:
            for w in self.vehicles:
                if v is not w:
                    self.net.subscribe(v.node, f"trajectory/{w.cfg.uav_id}",
                                       lambda msg, tr=v.tracker: tr.incorporate_neighbor(
                                           PredictedTrajectory.decode(msg.payload)))
        self.max_points = None
        if scenario.broadcast_budget is not None:
            self.max_points = max_points_for(scenario.channel(traj), scenario.broadcast_budget)
        self.bstride = max(1, int(round(scenario.broadcast_period / TICK)))

    # -- per-vehicle pieces
    def _fuse(self, v: _Vehicle, t: float):
        truth = v.plant.state
        for src in v.sources:
            for m in src.tick(truth, t):
                v.estimator.correct(m.source, m.position, m.heading, now=t, stamp=m.stamp)

    def _observe(self, v: _Vehicle, est: UavState, t: float):
        seen = []
        truth = v.plant.state
        for w in self.vehicles:
            if w is v:
                continue
            try:
                e = observe_any(truth, w.plant.state, v.cfg.uvdar.marker_baseline, v.cameras, v.uv_rng)
            except NotVisible:
                continue
            # the blinking code is read from an arbitrary phase of the neighbour's sequence
            phase = int(v.uv_rng.integers(len(w.member)))
            window = w.member[phase:] + w.member[:phase]
            e = type(e)(e.mean, e.covariance, self.by_member[self.decoder(window)])
            seen.append(e)
        v.flocker.observe(est, seen, t)

    def _command(self, v: _Vehicle, est: UavState, k: int, t: float) -> ReferenceCommand | None:
        if v.flocker is not None:
            if k % FLOCK_STRIDE == 0 or v.command is None:
                self._observe(v, est, t)
                v.command = v.flocker.step(est, FLOCK_STRIDE * TICK, t, heading=v.cfg.heading,
                                           offset=v.tracker.reference_offset)
            return v.command
        m = v.mission
        if m is not None and m.status != MissionStatus.DONE:
            ref = mission_step(m, est, t)
            if ref is None:
                return None
            return ref
        if m is not None and m.status == MissionStatus.DONE:
            return None
        if v.airborne_start:
            return ReferenceCommand(v.cfg.start, v.cfg.heading)
        return None

    def _step_vehicle(self, v: _Vehicle, k: int, t: float, writer) -> None:
        self._fuse(v, t)
        truth = v.plant.state
        est = None
        if v.estimator.initialized:
            # position, velocity and heading from the fused estimate; tilt and body rates come
            # from the autopilot's attitude filter, modelled as exact
            fused = v.estimator.get_state()
            est = UavState(fused.position, fused.velocity, truth.rotation.copy(), truth.body_rate.copy())
        cmd = self._command(v, est, k, t) if est is not None else None
        if cmd is None and v.mission is not None and v.mission.done:
            v.active = False
        elif cmd is not None:
            v.active = True
        thrust_d, omega = 0.0, np.zeros(3)
        if v.active and est is not None:
            if not v.tracker.initialized:
                v.tracker.update(est, t)
            if v.tracker.reference is None or not _same(v.tracker.reference, cmd):
                v.tracker.set_reference(cmd)
            ref = v.tracker.update(None, t)
            v.last_ref = ref
            out = compute(ref, est, v.gains, v.params.mass, v.max_thrust)
            v.estimator.predict(out.desired_acceleration, ref.heading_rate, TICK)
            thrust_d, omega = out.command.thrust, out.command.body_rate_setpoint
        else:
            if est is not None:
                v.estimator.predict(np.zeros(3), 0.0, TICK)
            out = None
        if est is not None:
            d = est.position - truth.position
            v.err_sq += float(d @ d)
            v.err_n += 1
        if writer is not None:
            writer.write(self._row(v, k, t, truth, est, thrust_d, omega))
        for _ in range(PLANT_SUBSTEPS):
            if out is None:
                motors = np.zeros(v.params.rotor_count)
            else:
                motors = v.loop.step(v.plant.state, out.command, TICK / PLANT_SUBSTEPS)
            v.plant.step(motors, TICK / PLANT_SUBSTEPS)

    def _row(self, v, k, t, truth, est, thrust_d, omega) -> str:
        vals = [*truth.position, *rotation_to_quaternion(truth.rotation)]
        if est is not None:
            vals += [*est.position, *rotation_to_quaternion(est.rotation)]
        else:
            vals += [math.nan] * 7
        if v.last_ref is not None:
            vals += v.last_ref.as_row()
        else:
            vals += [*truth.position, 0, 0, 0, 0, 0, 0, v.cfg.heading, 0]
        vals += [thrust_d, *omega, *v.plant.motor_thrusts]
        return f"{k},{_fmt(t)}," + ",".join(_fmt(x) for x in vals) + "\n"

    def _broadcast(self):
        ch = self.sc.trajectory_channel
        for v in self.vehicles:
            if not v.tracker.initialized or self.net.backlog(v.node, ch) > 0.0:
                continue
            traj = v.tracker.predicted_trajectory()
            if self.max_points is not None:
                traj = traj.decimated(self.max_points)
            self.net.publish(v.node, f"trajectory/{v.cfg.uav_id}", traj.encode())

    def run(self) -> RunReport:
        t_wall = time.perf_counter()
        sc = self.sc
        steps = int(round(sc.duration / TICK))
        writers = {}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for v in self.vehicles:
                f = io.StringIO()
                f.write(f"# mrs_microstack uav log v{LOG_VERSION} uav={v.cfg.uav_id} scenario={sc.name}\n")
                f.write(",".join(log_columns(v.params.rotor_count)) + "\n")
                writers[v.cfg.uav_id] = f
        positions = np.empty((len(self.vehicles), steps + 1, 3))
        assignments = {}
        for v in self.vehicles:
            if v.cfg.mission is not None:
                ms = v.cfg.mission
                wps = [ReferenceCommand(np.array(w[:3]), w[3]) for w in ms.waypoints]
                assignments[v.cfg.uav_id] = Mission(v.cfg.uav_id, ms.takeoff_altitude, wps, ms.tolerance,
                                                    ms.hold_time, ms.land_speed, sc.ground_z)
        k = 0
        try:
            self.gcs.dispatch(assignments)
            for k in range(steps + 1):
                t = k * TICK
                self.net.advance_to(t)
                for i, v in enumerate(self.vehicles):
                    positions[i, k] = v.plant.state.position
                    try:
                        self._step_vehicle(v, k, t, writers.get(v.cfg.uav_id))
                    except (DegenerateForce, FloatingPointError, ValueError, RuntimeError) as e:
                        raise SimulationPanic(k, t, v.cfg.uav_id, e) from e
                if k % self.bstride == 0:
                    self._broadcast()
        except SimulationPanic:
            raise
        except Exception as e:  # network errors and the like, not tied to one vehicle
            raise SimulationPanic(k, k * TICK, None, e) from e

        sep = math.inf
        n = len(self.vehicles)
        for i in range(n):
            for j in range(i + 1, n):
                sep = min(sep, float(np.min(np.linalg.norm(positions[i] - positions[j], axis=1))))
        uavs = []
        for v in self.vehicles:
            m = v.mission
            errs = []
            if m is not None:
                for phase, _, pos in m.arrivals:
                    if 1 <= phase <= len(m.waypoints):
                        errs.append(float(np.linalg.norm(pos - m.waypoints[phase - 1].position)))
            status = m.status.name if m is not None else ("FLOCKING" if v.flocker else "HOLD")
            rmse = math.sqrt(v.err_sq / v.err_n) if v.err_n else math.nan
            uavs.append(UavReport(v.cfg.uav_id, errs, rmse, status))
        report = RunReport(sc.name, sc.seed, steps + 1, sep, uavs, self.net.summary())
        if self.out_dir is not None:
            for uid, f in writers.items():
                p = self.out_dir / f"uav{uid}.csv"
                p.write_text(f.getvalue())
                report.logs[uid] = p
            (self.out_dir / "report.txt").write_text(report.to_text())
        report.wall_time = time.perf_counter() - t_wall
        return report


def _same(a: ReferenceCommand, b: ReferenceCommand) -> bool:
    return a.heading == b.heading and bool(np.array_equal(a.position, b.position))


def run(scenario: Scenario, out_dir: str | Path | None = None) -> RunReport:
    return Simulation(scenario, out_dir).run()
