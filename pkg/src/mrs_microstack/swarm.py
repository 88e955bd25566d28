"""Tracker-level multi-UAV simulation: each vehicle follows its reference exactly.

Used for encounter and flocking studies where the attitude dynamics are not the
subject; trajectory exchange still goes through the simulated network and
flocking still sees neighbours only through noisy relative localization.
"""

from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .core import ReferenceCommand, UavState, rot_z, vec3
from .missions import Flocker, FlockingParams
from .netsim import ChannelConfig, Network, max_points_for
from .tracking import (
    TICK,
    AvoidanceConfig,
    MpcTracker,
    PredictedTrajectory,
    TrackerConstraints,
)
from .uvdar import CameraModel, NotVisible, observe_any, ring_cameras


@dataclass(frozen=True)
class AgentSpec:
    uav_id: int
    priority: int
    start: np.ndarray
    goal: np.ndarray | None = None
    heading: float = 0.0


@dataclass
class SwarmResult:
    times: np.ndarray
    positions: np.ndarray  # (n, T, 3)
    references: list[list[list[float]]]  # per agent, per tick: FullStateReference row
    commands: list[list[list[float]]]  # per agent: flocking/mission position commands
    reached: list[float | None]
    min_separation: float
    activations: list[int]
    network: dict
    governor_interventions: int = 0

    def pairwise_distances(self) -> np.ndarray:
        """(pairs, T) 3D distances."""
        n = self.positions.shape[0]
        return np.array([
            np.linalg.norm(self.positions[i] - self.positions[j], axis=1)
            for i, j in itertools.combinations(range(n), 2)
        ])


def circle_agents(n: int, radius: float = 10.0, altitude: float = 2.0, phase: float = 0.0) -> list[AgentSpec]:
    """Vehicles evenly spaced on a circle with goals at the antipodes."""
    out = []
    for i in range(n):
        a = phase + 2.0 * math.pi * i / n
        p = vec3(radius * math.cos(a), radius * math.sin(a), altitude)
        out.append(AgentSpec(i, i, p, vec3(-p[0], -p[1], altitude)))
    return out


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def run_swarm(
    agents: list[AgentSpec],
    duration: float,
    constraints: TrackerConstraints | None = None,
    avoidance: AvoidanceConfig | None = None,
    channel: ChannelConfig | None = None,
    seed: int = 0,
    broadcast_period: float = 0.2,
    broadcast_budget: float | None = None,
    goal_tolerance: float = 0.05,
    flocking: FlockingParams | None = None,
    flock_period: float = 0.1,
    marker_baseline: float = 0.45,
    cameras: list[CameraModel] | None = None,
    stop_when_reached: bool = False,
) -> SwarmResult:
    """Advance all trackers in lockstep at 100 Hz.

    Trajectories are broadcast every ``broadcast_period`` when the sender's
    link is idle.  With ``broadcast_budget`` (s) set, the broadcast horizon is
    decimated so one record serializes within the budget on ``channel``.
    """
    constraints = constraints or TrackerConstraints()
    channel = channel or ChannelConfig("ideal", bandwidth=1e9, latency=0.0, loss_probability=0.0)
    cameras = cameras or ring_cameras(3, vertical=True)
    net = Network(_stream(seed, "netsim"))
    net.add_channel(channel)
    max_points = None
    if broadcast_budget is not None:
        max_points = max_points_for(channel, broadcast_budget)

    n = len(agents)
    trackers = []
    for a in agents:
        st = UavState(position=np.array(a.start, dtype=float), rotation=rot_z(a.heading))
        tr = MpcTracker(constraints, a.uav_id, a.priority, avoidance)
        tr.update(st, 0.0)
        goal = a.goal if a.goal is not None else a.start
        tr.set_reference(ReferenceCommand(goal, a.heading))
        trackers.append(tr)

    nodes = [f"uav{a.uav_id}" for a in agents]
    for i, a in enumerate(agents):
        net.expose_topic(nodes[i], f"trajectory/{a.uav_id}", channel.name)
    for i, a in enumerate(agents):
        for j, b in enumerate(agents):
            if i != j:
                tr = trackers[i]
                net.subscribe(nodes[i], f"trajectory/{b.uav_id}",
                              lambda msg, tr=tr: tr.incorporate_neighbor(PredictedTrajectory.decode(msg.payload)))

    flockers = [Flocker(flocking) for _ in agents] if flocking else None
    uv_rng = [_stream(seed, f"uvdar/{a.uav_id}") for a in agents]

    steps = int(round(duration / TICK))
    bstride = max(1, int(round(broadcast_period / TICK)))
    fstride = max(1, int(round(flock_period / TICK)))
    pos = np.empty((n, steps + 1, 3))
    refs: list[list[list[float]]] = [[] for _ in agents]
    cmds: list[list[list[float]]] = [[] for _ in agents]
    outs = [tr.output() for tr in trackers]
    for i, o in enumerate(outs):
        pos[i, 0] = o.position
        refs[i].append(o.as_row())
    reached: list[float | None] = [None] * n
    last_pub = [-math.inf] * n
    k_end = steps
    for k in range(1, steps + 1):
        t = k * TICK
        # publish, then deliver what is due, then advance each tracker one tick
        if (k - 1) % bstride == 0:
            for i, tr in enumerate(trackers):
                if net.backlog(nodes[i], channel.name) > 0.0:
                    continue
                traj = tr.predicted_trajectory()
                if max_points is not None:
                    traj = traj.decimated(max_points)
                net.publish(nodes[i], f"trajectory/{agents[i].uav_id}", traj.encode())
                last_pub[i] = net.now
        net.advance_to(t)
        if flockers is not None and k % fstride == 0:
            states = [UavState(position=o.position.copy(), velocity=o.velocity.copy(), rotation=rot_z(o.heading))
                      for o in outs]
            for i, fl in enumerate(flockers):
                seen = []
                for j in range(n):
                    if j == i:
                        continue
                    try:
                        seen.append(observe_any(states[i], states[j], marker_baseline, cameras, uv_rng[i],
                                                agents[j].uav_id))
                    except NotVisible:
                        pass
                fl.observe(states[i], seen, t)
                cmd = fl.step(states[i], flock_period, t, heading=agents[i].heading,
                              offset=trackers[i].reference_offset)
                cmds[i].append([t, *cmd.position.tolist()])
                trackers[i].set_reference(cmd)
        outs = [tr.update(None, t) for tr in trackers]
        for i, o in enumerate(outs):
            pos[i, k] = o.position
            refs[i].append(o.as_row())
            if reached[i] is None and agents[i].goal is not None:
                if np.linalg.norm(o.position - agents[i].goal) < goal_tolerance:
                    reached[i] = t
        if stop_when_reached and all(r is not None for r in reached):
            k_end = k
            break
    pos = pos[:, : k_end + 1]
    res = SwarmResult(
        times=TICK * np.arange(k_end + 1),
        positions=pos,
        references=refs,
        commands=cmds,
        reached=reached,
        min_separation=math.inf,
        activations=[tr.status.activations for tr in trackers],
        network=net.summary(),
        governor_interventions=sum(tr._trans.infeasible_ticks for tr in trackers),
    )
    if n > 1:
        res.min_separation = float(res.pairwise_distances().min())
    return res


def unobstructed_time(agent: AgentSpec, constraints: TrackerConstraints) -> float:
    """Rest-to-rest time for a straight transfer under the horizontal speed/accel limits."""
    d = float(np.linalg.norm(np.asarray(agent.goal) - np.asarray(agent.start)))
    v, a = constraints.v_max_h, constraints.a_max_h
    if d >= v * v / a:
        return d / v + v / a
    return 2.0 * math.sqrt(d / a)
