"""Waypoint missions, ground-station dispatch and UVDAR-driven flocking."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ReferenceCommand, UavState, heading_of, vec3
from .netsim import Network, StatusRecord
from .uvdar import RelativePoseEstimate


class MissionStatus(enum.IntEnum):
    IDLE = 0
    ARMED = 1
    EXECUTING = 2
    DONE = 3
    FAILSAFE = 4


@dataclass
class Mission:
    uav_id: int
    takeoff_altitude: float
    waypoints: list[ReferenceCommand] = field(default_factory=list)
    tolerance: float = 0.5
    hold_time: float = 1.0
    land_speed: float = 0.5
    ground_z: float = 0.0
    status: MissionStatus = MissionStatus.IDLE
    phase: int = 0  # 0 takeoff, 1..n waypoints, n + 1 land
    _inside_since: float | None = None
    _origin: ReferenceCommand | None = None
    _descent: tuple[float, np.ndarray, float] | None = None  # t0, anchor, z0
    _last_target: ReferenceCommand | None = None
    _land_heading: float = 0.0
    arrivals: list[tuple[int, float, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @property
    def land_phase(self) -> int:
        return len(self.waypoints) + 1

    @property
    def done(self) -> bool:
        return self.status == MissionStatus.DONE

    def arm(self):
        if self.status == MissionStatus.IDLE:
            self.status = MissionStatus.ARMED

    def trigger_failsafe(self, estimate: UavState, now: float):
        if self.status in (MissionStatus.DONE, MissionStatus.FAILSAFE):
            return
        self.status = MissionStatus.FAILSAFE
        self._descent = (now, estimate.position.copy(), float(estimate.position[2]))

    def _phase_target(self) -> ReferenceCommand:
        if self.phase == 0:
            o = self._origin
            return ReferenceCommand(vec3(o.position[0], o.position[1], self.ground_z + self.takeoff_altitude), o.heading)
        return self.waypoints[self.phase - 1]

    def _descend(self, now: float, heading: float) -> ReferenceCommand:
        t0, anchor, z0 = self._descent
        z = max(self.ground_z, z0 - self.land_speed * (now - t0))
        return ReferenceCommand(vec3(anchor[0], anchor[1], z), heading)


def mission_step(m: Mission, estimate: UavState, now: float) -> ReferenceCommand | None:
    """Active reference for ``m``; None once the mission is done."""
    if m.status == MissionStatus.IDLE:
        raise RuntimeError("mission not armed")
    if m.status == MissionStatus.DONE:
        return None
    try:
        heading = heading_of(estimate.rotation)
    except ValueError:
        heading = 0.0
    if m._origin is None:
        m._origin = ReferenceCommand(estimate.position.copy(), heading)
    if m.status == MissionStatus.FAILSAFE:
        return m._descend(now, m._origin.heading)
    m.status = MissionStatus.EXECUTING

    if m.phase < m.land_phase:
        target = m._phase_target()
        if np.linalg.norm(estimate.position - target.position) > m.tolerance:
            m._inside_since = None
            return target
        if m._inside_since is None:
            m._inside_since = now
        if now - m._inside_since < m.hold_time - 1e-9:
            return target
        m.arrivals.append((m.phase, now, estimate.position.copy()))
        m._last_target = target
        m._inside_since = None
        m.phase += 1
        if m.phase < m.land_phase:
            return m._phase_target()

    # landing: descend from the last target straight down to the ground
    if m._descent is None:
        last = m._last_target
        anchor = estimate.position.copy() if last is None else last.position.copy()
        m._descent = (now, anchor, float(anchor[2]))
        m._land_heading = heading if last is None else last.heading
    ref = m._descend(now, m._land_heading)
    if ref.position[2] <= m.ground_z and estimate.position[2] - m.ground_z < 0.1:
        m.status = MissionStatus.DONE
        m.arrivals.append((m.phase, now, estimate.position.copy()))
    return ref


# -- mission wire format -----------------------------------------------------------

MISSION_FORMAT_VERSION = 1
_MISSION_HEAD = struct.Struct("<BHfffffB")
_WAYPOINT = struct.Struct("<ffff")


def encode_mission(m: Mission) -> bytes:
    if len(m.waypoints) > 255:
        raise ValueError("at most 255 waypoints per mission record")
    out = [_MISSION_HEAD.pack(MISSION_FORMAT_VERSION, m.uav_id, m.takeoff_altitude, m.tolerance,
                              m.hold_time, m.land_speed, m.ground_z, len(m.waypoints))]
    out += [_WAYPOINT.pack(*w.position, w.heading) for w in m.waypoints]
    return b"".join(out)


def decode_mission(data: bytes) -> Mission:
    ver, uid, alt, tol, hold, land, ground, n = _MISSION_HEAD.unpack_from(data)
    if ver != MISSION_FORMAT_VERSION:
        raise ValueError(f"unsupported mission format version {ver}")
    wps = []
    for i in range(n):
        x, y, z, h = _WAYPOINT.unpack_from(data, _MISSION_HEAD.size + i * _WAYPOINT.size)
        wps.append(ReferenceCommand(vec3(x, y, z), h))
    return Mission(uid, alt, wps, tolerance=tol, hold_time=hold, land_speed=land, ground_z=ground)


def mission_topic(uav_id: int) -> str:
    return f"mission/{uav_id}"


def status_topic(uav_id: int) -> str:
    return f"status/{uav_id}"


def uav_node(uav_id: int) -> str:
    return f"uav{uav_id}"


class MissionEndpoint:
    """UAV side: receives a mission, stores it, acknowledges with a status record."""

    def __init__(self, net: Network, uav_id: int, channel: str, position_fn=None):
        self.net, self.uav_id = net, uav_id
        self.node = uav_node(uav_id)
        self.mission: Mission | None = None
        self.position_fn = position_fn or (lambda: (0.0, 0.0, 0.0))
        net.expose_topic(self.node, status_topic(uav_id), channel)
        net.subscribe(self.node, mission_topic(uav_id), self._on_mission)

    def _on_mission(self, msg):
        self.mission = decode_mission(msg.payload)
        self.mission.arm()
        rec = StatusRecord(self.uav_id, int(self.mission.status), tuple(float(v) for v in self.position_fn()))
        self.net.publish(self.node, status_topic(self.uav_id), rec.encode())


class GroundStation:
    def __init__(self, net: Network, channel: str, node: str = "gcs"):
        self.net, self.channel, self.node = net, channel, node
        self.acks: dict[int, StatusRecord] = {}
        self.dispatched: dict[int, float] = {}

    def dispatch(self, assignments: dict[int, Mission]) -> int:
        """Publish every assignment; returns the number of messages sent."""
        sent = 0
        for uid in sorted(assignments):
            topic = mission_topic(uid)
            self.net.expose_topic(self.node, topic, self.channel)
            self.net.subscribe(self.node, status_topic(uid), self._on_status)
            self.net.publish(self.node, topic, encode_mission(assignments[uid]))
            self.dispatched[uid] = self.net.now
            sent += 1
        return sent

    def _on_status(self, msg):
        rec = StatusRecord.decode(msg.payload)
        self.acks[rec.uav_id] = rec

    def unacknowledged(self) -> list[int]:
        return sorted(set(self.dispatched) - set(self.acks))


def gcs_dispatch(gcs: GroundStation, assignments: dict[int, Mission]) -> int:
    return gcs.dispatch(assignments)


# -- flocking --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlockingParams:
    desired_distance: float = 5.0
    cohesion_gain: float = 0.3
    separation_gain: float = 1.0
    alignment_gain: float = 0.3
    max_speed: float = 1.0
    neighbor_timeout: float = 1.0
    smoothing: float = 0.3  # weight of a new relative sample in the per-neighbour low-pass
    leash: float = 1.0  # m; the integrated reference never runs further ahead of the estimate

    def __post_init__(self):
        if not self.desired_distance > 0:
            raise ValueError("desired_distance must be positive")
        for g in ("cohesion_gain", "separation_gain", "alignment_gain"):
            if getattr(self, g) < 0:
                raise ValueError(f"{g} must be non-negative")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")


@dataclass
class _Track:
    rel: np.ndarray  # smoothed relative position, world-aligned axes
    stamp: float
    rel_vel: np.ndarray = field(default_factory=vec3)


class Flocker:
    """Reynolds-style rules on relative estimates only.

    Relative estimates arrive in the observer body frame and are rotated by the
    own attitude estimate; nothing about any neighbour's absolute state is used.
    """

    def __init__(self, params: FlockingParams):
        self.params = params
        self.tracks: dict[int, _Track] = {}
        self.reference: np.ndarray | None = None
        self.last_velocity = vec3()
        self._offset = vec3()
        self._settling = False

    def observe(self, own: UavState, estimates: list[RelativePoseEstimate], now: float):
        a = self.params.smoothing
        for e in estimates:
            rel = own.rotation @ e.mean
            tr = self.tracks.get(e.observed_id)
            if tr is None or now - tr.stamp > self.params.neighbor_timeout:
                self.tracks[e.observed_id] = _Track(rel, now)
                continue
            dt = now - tr.stamp
            smoothed = (1.0 - a) * tr.rel + a * rel
            if dt > 0:
                tr.rel_vel = (1.0 - a) * tr.rel_vel + a * (smoothed - tr.rel) / dt
            tr.rel, tr.stamp = smoothed, now

    def velocity(self, now: float) -> np.ndarray:
        p = self.params
        live = [t for _, t in sorted(self.tracks.items()) if now - t.stamp <= p.neighbor_timeout]
        if not live:
            return vec3()
        rels = np.array([t.rel for t in live])
        v = vec3()
        c = rels.mean(axis=0)
        cn = np.linalg.norm(c)
        if cn > 1e-9:
            v += p.cohesion_gain * (c - p.desired_distance * c / cn) * (cn > p.desired_distance)
        for r in rels:
            d = np.linalg.norm(r)
            if 1e-9 < d < p.desired_distance:
                v += p.separation_gain * (d - p.desired_distance) * r / d
        v += p.alignment_gain * np.mean([t.rel_vel for t in live], axis=0)
        n = np.linalg.norm(v)
        if n > p.max_speed:
            v *= p.max_speed / n
        return v

    def step(self, own: UavState, dt: float, now: float, heading: float | None = None,
             offset: np.ndarray | None = None) -> ReferenceCommand:
        """``offset`` is what the tracker adds on top of the reference (an avoidance
        layer).  The leash compares against the position without it, and is not
        applied while the vehicle is still moving to a new offset: a re-anchor then
        would feed the offset back into the reference."""
        p = self.params
        offset = vec3() if offset is None else np.asarray(offset, dtype=float)
        anchor = own.position - offset
        if self.reference is None:
            # nothing has moved the vehicle toward the offset yet
            self.reference = own.position.copy()
            self._offset, self._settling = offset.copy(), bool(np.any(offset))
        elif not np.array_equal(offset, self._offset):
            self._offset, self._settling = offset.copy(), True
        if np.linalg.norm(self.reference - anchor) <= p.leash:
            self._settling = False
        elif not self._settling:
            self.reference = anchor.copy()
        v = self.velocity(now)
        self.last_velocity = v
        self.reference = self.reference + v * dt
        if heading is None:
            try:
                heading = heading_of(own.rotation)
            except ValueError:
                heading = 0.0
        return ReferenceCommand(self.reference.copy(), heading)


def flocking_step(own: UavState, neighbors: list[RelativePoseEstimate], params: FlockingParams,
                  dt: float, flocker: Flocker | None = None, now: float = 0.0) -> ReferenceCommand:
    """One flocking update; pass a persistent ``flocker`` to keep neighbour history."""
    f = flocker or Flocker(params)
    f.observe(own, neighbors, now)
    return f.step(own, dt, now)
