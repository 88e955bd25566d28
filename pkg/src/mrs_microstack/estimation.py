"""Multi-source state estimator: decoupled per-axis Kalman filters plus a heading filter.

Prediction is driven by the controller's desired acceleration; every registered
odometry source corrects the state directly (simultaneous fusion).  Each source
carries an offset into the estimator frame.  Sources that share the world frame
have a zero offset from the start; the others are aligned the first time the
estimator switches to them, so the fused output never jumps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import G0, E3, UavState, rot_z, rotation_from_thrust_heading, wrap_heading

log = logging.getLogger(__name__)

GATE_SIGMAS = 5.0


class UnknownSource(KeyError):
    pass


class SourceNeverSeen(RuntimeError):
    pass


class NotInitialized(RuntimeError):
    pass


@dataclass
class SourceRecord:
    name: str
    sigma_position: float
    sigma_heading: float
    frame_aligned: bool = True
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heading_offset: float = 0.0
    last_measurement: tuple[float, np.ndarray, float] | None = None  # stamp, position, heading
    estimate_at_last: tuple[np.ndarray, float] | None = None
    accepted: int = 0
    rejected: int = 0


@dataclass
class EstimatorState:
    position: np.ndarray
    velocity: np.ndarray
    heading: float
    covariance: np.ndarray  # (3, 2, 2): per-axis [p, v]
    heading_variance: float
    active_source: str | None
    offsets: dict[str, tuple[np.ndarray, float]]


class StateEstimator:
    def __init__(self, accel_noise: float = 0.5, heading_rate_noise: float = 0.05,
                 initial_velocity_sigma: float = 1.0, gate: float = GATE_SIGMAS):
        self.accel_noise = accel_noise
        self.heading_rate_noise = heading_rate_noise
        self.initial_velocity_sigma = initial_velocity_sigma
        self.gate = gate
        self.sources: dict[str, SourceRecord] = {}
        self.active_source: str | None = None
        self.x = np.zeros((3, 2))
        self.P = np.zeros((3, 2, 2))
        self.heading = 0.0
        self.heading_var = 0.0
        self.initialized = False
        self.last_accel = np.zeros(3)
        self.body_rate = np.zeros(3)

    # -- configuration
    def register_source(self, name: str, sigma_position: float, sigma_heading: float = 0.05,
                        frame_aligned: bool = True):
        if not (sigma_position > 0 and sigma_heading > 0):
            raise ValueError("measurement sigmas must be positive")
        self.sources[name] = SourceRecord(name, sigma_position, sigma_heading, frame_aligned)
        if self.active_source is None and frame_aligned:
            self.active_source = name

    # -- filter
    def predict(self, a_d: np.ndarray, heading_rate: float, dt: float):
        if not dt > 0:
            raise ValueError("dt must be positive")
        a = np.asarray(a_d, dtype=float)
        self.last_accel = a.copy()
        if not self.initialized:
            return
        f = np.array([[1.0, dt], [0.0, 1.0]])
        b = np.array([0.5 * dt * dt, dt])
        self.x = self.x @ f.T + a[:, None] * b
        q = self.accel_noise ** 2 * np.outer(b, b)
        self.P = f @ self.P @ f.T + q
        self.heading = wrap_heading(self.heading + heading_rate * dt)
        self.heading_var += (self.heading_rate_noise * dt) ** 2

    def set_body_rate(self, gyro: np.ndarray):
        self.body_rate = np.asarray(gyro, dtype=float).copy()

    def _initialize(self, pos: np.ndarray, heading: float, src: SourceRecord):
        self.x = np.column_stack((pos, np.zeros(3)))
        self.P = np.zeros((3, 2, 2))
        self.P[:, 0, 0] = src.sigma_position ** 2
        self.P[:, 1, 1] = self.initial_velocity_sigma ** 2
        self.heading = heading
        self.heading_var = src.sigma_heading ** 2
        self.initialized = True

    def correct(self, source: str, position: np.ndarray, heading: float, now: float | None = None,
                stamp: float | None = None, sigma_position: float | None = None,
                sigma_heading: float | None = None) -> bool:
        """Fuse one measurement; returns False when it was gated out or only recorded."""
        src = self.sources.get(source)
        if src is None:
            raise UnknownSource(f"source {source!r} not registered; known: {sorted(self.sources)}")
        pos = np.asarray(position, dtype=float)
        if now is not None and stamp is not None and self.initialized:
            # latency compensation with the current velocity estimate
            pos = pos + self.x[:, 1] * (now - stamp)
        src.last_measurement = (stamp if stamp is not None else (now or 0.0), pos.copy(), float(heading))
        if self.initialized:
            src.estimate_at_last = (self.x[:, 0].copy(), self.heading)
        if not src.frame_aligned:
            return False
        z = pos + src.offset
        zh = wrap_heading(heading + src.heading_offset)
        sp = src.sigma_position if sigma_position is None else sigma_position
        sh = src.sigma_heading if sigma_heading is None else sigma_heading
        if not self.initialized:
            if source != self.active_source:
                self.active_source = source
            self._initialize(z, zh, src)
            src.estimate_at_last = (self.x[:, 0].copy(), self.heading)
            src.accepted += 1
            return True

        r = sp * sp
        innov = z - self.x[:, 0]
        s = self.P[:, 0, 0] + r
        innov_h = wrap_heading(zh - self.heading)
        s_h = self.heading_var + sh * sh
        if np.any(np.abs(innov) > self.gate * np.sqrt(s)) or abs(innov_h) > self.gate * math.sqrt(s_h):
            src.rejected += 1
            log.info("rejected %s measurement: innovation %s, heading %.3f", source, innov, innov_h)
            return False
        k = self.P[:, :, 0] / s[:, None]  # (3, 2)
        self.x = self.x + k * innov[:, None]
        # Joseph form keeps the covariance symmetric PSD
        h = np.array([1.0, 0.0])
        ikh = np.eye(2)[None] - k[:, :, None] * h[None, None, :]
        self.P = ikh @ self.P @ np.transpose(ikh, (0, 2, 1)) + r * k[:, :, None] * k[:, None, :]
        self.P = 0.5 * (self.P + np.transpose(self.P, (0, 2, 1)))
        kh = self.heading_var / s_h
        self.heading = wrap_heading(self.heading + kh * innov_h)
        self.heading_var = (1.0 - kh) ** 2 * self.heading_var + kh * kh * sh * sh
        src.accepted += 1
        return True

    def switch_source(self, new_source: str):
        src = self.sources.get(new_source)
        if src is None:
            raise UnknownSource(f"source {new_source!r} not registered")
        if src.last_measurement is None:
            raise SourceNeverSeen(f"source {new_source!r} has not produced a measurement yet")
        if not src.frame_aligned:
            if not self.initialized:
                raise NotInitialized("cannot align a source before the estimator is initialized")
            _, meas, meas_h = src.last_measurement
            est, est_h = src.estimate_at_last if src.estimate_at_last else (self.x[:, 0], self.heading)
            src.offset = est - meas
            src.heading_offset = wrap_heading(est_h - meas_h)
            src.frame_aligned = True
        self.active_source = new_source

    # -- outputs
    def state(self) -> EstimatorState:
        if not self.initialized:
            raise NotInitialized("no correction received yet")
        return EstimatorState(
            self.x[:, 0].copy(), self.x[:, 1].copy(), self.heading, self.P.copy(), self.heading_var,
            self.active_source,
            {n: (s.offset.copy(), s.heading_offset) for n, s in self.sources.items()},
        )

    def get_state(self) -> UavState:
        if not self.initialized:
            raise NotInitialized("no correction received yet")
        thrust_dir = self.last_accel + G0 * E3
        if thrust_dir[2] > 1e-6:
            rot = rotation_from_thrust_heading(thrust_dir, self.heading)
        else:
            rot = rot_z(self.heading)
        return UavState(self.x[:, 0].copy(), self.x[:, 1].copy(), rot, self.body_rate.copy())

    def trace(self) -> float:
        return float(np.trace(self.P, axis1=1, axis2=2).sum() + self.heading_var)
