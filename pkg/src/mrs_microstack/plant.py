"""Multirotor rigid-body plant, thrust allocation, embedded rate loop and sensor models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import (
    E3,
    G0,
    AttitudeRateCommand,
    MotorCommand,
    UavState,
    cross3,
    heading_of,
    wrap_heading,
)
from .propulsion import PlatformSpec, PropulsionCurve


class InvalidCommand(ValueError):
    pass


class RankDeficientGeometry(ValueError):
    pass


@dataclass(frozen=True)
class RigidBodyParams:
    """Newton-Euler parameters.

    ``spins[i]`` is the sign of the yaw moment rotor ``i`` exerts on the body
    (reaction drag torque is ``spins[i] * yaw_moment_coefficient * thrust``).
    """

    mass: float
    inertia: np.ndarray  # diagonal, kg m^2
    arms: np.ndarray  # (n, 3) rotor positions in body frame
    spins: np.ndarray  # (n,) +-1
    rotor_max_thrust: float
    motor_time_constant: float = 0.03
    drag_coefficient: float = 0.1  # N s / m
    yaw_moment_coefficient: float = 0.016  # m
    rate_limit: float = 6.0  # rad/s per body axis

    def __post_init__(self):
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=float).reshape(3))
        object.__setattr__(self, "arms", np.asarray(self.arms, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "spins", np.asarray(self.spins, dtype=float).reshape(-1))
        if self.mass <= 0 or np.any(self.inertia <= 0) or self.rotor_max_thrust <= 0:
            raise ValueError("mass, inertia and rotor_max_thrust must be positive")
        if len(self.arms) != len(self.spins):
            raise ValueError("arms and spins length mismatch")
        if self.motor_time_constant <= 0:
            raise ValueError("motor_time_constant must be positive")

    @property
    def rotor_count(self) -> int:
        return len(self.spins)

    @property
    def hover_thrust(self) -> float:
        return self.mass * G0

    @cached_property
    def allocation_matrix(self) -> np.ndarray:
        """Maps per-rotor thrusts to (collective thrust, roll, pitch, yaw torque)."""
        x, y = self.arms[:, 0], self.arms[:, 1]
        return np.vstack(
            (np.ones(self.rotor_count), y, -x, self.spins * self.yaw_moment_coefficient)
        )

    @cached_property
    def mixer(self) -> np.ndarray:
        a = self.allocation_matrix
        if np.linalg.matrix_rank(a) < 4:
            raise RankDeficientGeometry("rotor geometry cannot produce independent torques")
        return np.linalg.pinv(a)


def _inertia_guess(mass: float, arm: float) -> np.ndarray:
    ixy = 0.2 * mass * arm**2
    return np.array([ixy, ixy, 2.0 * ixy])


def quad_x(mass: float, arm_length: float, rotor_max_thrust: float, **kw) -> RigidBodyParams:
    """Quad-X: rotors at 45 deg, 135 deg, ...; diagonally opposite rotors share a spin."""
    angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])
    arms = np.column_stack((arm_length * np.cos(angles), arm_length * np.sin(angles), np.zeros(4)))
    spins = np.array([1.0, -1.0, 1.0, -1.0])
    kw.setdefault("inertia", _inertia_guess(mass, arm_length))
    return RigidBodyParams(mass=mass, arms=arms, spins=spins, rotor_max_thrust=rotor_max_thrust, **kw)


def coax_octo(mass: float, arm_length: float, rotor_max_thrust: float, **kw) -> RigidBodyParams:
    """X8: four arms, a counter-rotating rotor pair stacked on each arm."""
    angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])
    arms = []
    spins = []
    for k, a in enumerate(angles):
        p = [arm_length * math.cos(a), arm_length * math.sin(a)]
        arms += [p + [0.05], p + [-0.05]]
        s = 1.0 if k % 2 == 0 else -1.0
        spins += [s, -s]
    kw.setdefault("inertia", _inertia_guess(mass, arm_length))
    return RigidBodyParams(
        mass=mass, arms=np.array(arms), spins=np.array(spins), rotor_max_thrust=rotor_max_thrust, **kw
    )


def params_from_platform(spec: PlatformSpec, curve: PropulsionCurve, payload: float = 0.0, **kw) -> RigidBodyParams:
    arm = spec.dimension / 2000.0
    mass = spec.takeoff_mass + payload
    factory = coax_octo if spec.layout == "coaxial" else quad_x
    return factory(mass, arm, curve.max_thrust, **kw)


# -- rigid body ---------------------------------------------------------------


def allocate(total_thrust: float, torque, params: RigidBodyParams) -> MotorCommand:
    """Minimum-norm per-rotor thrusts for (total thrust, body torque).

    Infeasible requests are clamped to ``[0, rotor_max_thrust]`` and flagged.
    """
    wrench = np.array([total_thrust, torque[0], torque[1], torque[2]], dtype=float)
    thrusts = params.mixer @ wrench
    lo, hi = 0.0, params.rotor_max_thrust
    feasible = bool(np.all(thrusts >= lo - 1e-12) and np.all(thrusts <= hi + 1e-12))
    return MotorCommand(np.clip(thrusts, lo, hi), feasible)


def wrench_of(thrusts, params: RigidBodyParams) -> np.ndarray:
    return params.allocation_matrix @ np.asarray(thrusts, dtype=float)


class Multirotor:
    """Rigid-body multirotor with first-order motor lag, integrated with fixed-step RK4."""

    def __init__(
        self,
        params: RigidBodyParams,
        state: UavState | None = None,
        motor_thrusts=None,
        ground_z: float | None = None,
    ):
        self.params = params
        self.state = state.copy() if state is not None else UavState()
        if motor_thrusts is None:
            motor_thrusts = np.zeros(params.rotor_count)
        self.motor_thrusts = np.array(motor_thrusts, dtype=float)
        self.ground_z = ground_z
        self._inertia = params.inertia
        self._inv_inertia = 1.0 / params.inertia
        self._inv_mass = 1.0 / params.mass
        self._inv_tau = 1.0 / params.motor_time_constant
        self._a = params.allocation_matrix
        self._drag = params.drag_coefficient
        self._j = params.inertia.tolist()
        self._ij = self._inv_inertia.tolist()

    @classmethod
    def hovering(cls, params: RigidBodyParams, state: UavState | None = None, **kw) -> "Multirotor":
        thrusts = np.full(params.rotor_count, params.hover_thrust / params.rotor_count)
        return cls(params, state, thrusts, **kw)

    def _deriv(self, y: np.ndarray, cmd: np.ndarray) -> np.ndarray:
        # y = [p(3), v(3), R row-major(9), w(3), rotor thrusts(n)]
        v = y[3:6]
        r = y[6:15].reshape(3, 3)
        wx, wy, wz = y[15:18].tolist()
        thr = y[18:]
        fz, tx, ty, tz = (self._a @ thr).tolist()
        out = np.empty_like(y)
        out[0:3] = v
        out[3:6] = (r[:, 2] * fz - self._drag * v) * self._inv_mass
        out[5] -= G0
        out[6:15] = (r @ np.array(((0.0, -wz, wy), (wz, 0.0, -wx), (-wy, wx, 0.0)))).ravel()
        jx, jy, jz = self._j
        ix, iy, iz = self._ij
        # w x Jw
        out[15] = ix * (tx - (wy * jz * wz - wz * jy * wy))
        out[16] = iy * (ty - (wz * jx * wx - wx * jz * wz))
        out[17] = iz * (tz - (wx * jy * wy - wy * jx * wx))
        out[18:] = (cmd - thr) * self._inv_tau
        return out

    def _pack(self) -> np.ndarray:
        s = self.state
        return np.concatenate(
            (s.position, s.velocity, s.rotation.ravel(), s.body_rate, self.motor_thrusts)
        )

    def step(self, cmd: MotorCommand | np.ndarray, dt: float) -> UavState:
        thrusts = cmd.thrusts if isinstance(cmd, MotorCommand) else np.asarray(cmd, dtype=float)
        if len(thrusts) != self.params.rotor_count:
            raise InvalidCommand(
                f"command has {len(thrusts)} rotors, platform has {self.params.rotor_count}"
            )
        if np.any(thrusts < 0) or not np.all(np.isfinite(thrusts)):
            raise InvalidCommand("rotor thrusts must be finite and non-negative")
        if not 0.0 < dt <= 0.005:
            raise ValueError(f"dt={dt} outside (0, 0.005]")
        cmd_t = np.minimum(thrusts, self.params.rotor_max_thrust)
        y = self._pack()
        k1 = self._deriv(y, cmd_t)
        k2 = self._deriv(y + (0.5 * dt) * k1, cmd_t)
        k3 = self._deriv(y + (0.5 * dt) * k2, cmd_t)
        k4 = self._deriv(y + dt * k3, cmd_t)
        y = y + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("plant state diverged")
        pos, vel, rate = y[0:3], y[3:6], y[15:18]
        rot = y[6:15].reshape(3, 3)
        # one Newton step of the polar iteration; per-step drift is O(dt^5)
        rot = 1.5 * rot - 0.5 * rot @ rot.T @ rot
        self.motor_thrusts = y[18:]
        if self.ground_z is not None and pos[2] < self.ground_z:
            pos[2] = self.ground_z
            vel = np.zeros(3)
            rate = np.zeros(3)
        self.state = UavState(pos, vel, rot, rate)
        return self.state

    def acceleration(self) -> np.ndarray:
        """World-frame linear acceleration at the current state."""
        s = self.state
        return self._deriv(self._pack(), self.motor_thrusts)[3:6]

    def specific_force(self) -> np.ndarray:
        """Accelerometer-frame specific force (body frame), noise-free."""
        return specific_force(self.state, self.motor_thrusts, self.params)


def specific_force(state: UavState, thrusts, params: RigidBodyParams) -> np.ndarray:
    total = float(np.sum(thrusts))
    drag_body = state.rotation.T @ (params.drag_coefficient * state.velocity)
    return (total * E3 - drag_body) / params.mass


# -- embedded attitude-rate loop -------------------------------------------------


@dataclass
class RateLoopGains:
    kp: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0, 10.0]))
    ki: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 1.0]))
    integral_limit: float = 0.5  # rad (integrated rate error)


class AttitudeRateLoop:
    """PI body-rate controller feeding the mixer, with conditional-integration anti-windup."""

    def __init__(self, params: RigidBodyParams, gains: RateLoopGains | None = None):
        self.params = params
        self.gains = gains or RateLoopGains()
        self.integral = np.zeros(3)

    def reset(self):
        self.integral = np.zeros(3)

    def step(self, state: UavState, cmd: AttitudeRateCommand, dt: float) -> MotorCommand:
        p = self.params
        lim = p.rate_limit
        setpoint = np.clip(cmd.body_rate_setpoint, -lim, lim)
        err = setpoint - state.body_rate
        g = self.gains
        w = state.body_rate
        jw = p.inertia * w
        candidate = np.clip(self.integral + err * dt, -g.integral_limit, g.integral_limit)
        torque = p.inertia * (g.kp * err + g.ki * candidate) + cross3(w, jw)
        out = allocate(max(cmd.thrust, 0.0), torque, p)
        if out.feasible:
            self.integral = candidate
        return out


def attitude_rate_loop(state, cmd, params, dt, loop: AttitudeRateLoop | None = None) -> MotorCommand:
    """Functional form: one tick of a (fresh or supplied) rate loop."""
    loop = loop or AttitudeRateLoop(params)
    return loop.step(state, cmd, dt)


# -- sensors --------------------------------------------------------------------


@dataclass(frozen=True)
class VibrationConfig:
    rotor_frequency: float = 100.0  # Hz
    amp_fundamental: float = 2.0  # m/s^2
    amp_second_harmonic: float = 1.0  # m/s^2


@dataclass(frozen=True)
class ImuConfig:
    sample_rate: float = 1000.0
    white_noise_sigma: float = 0.05
    gyro_noise_sigma: float = 0.005
    vibration: VibrationConfig = VibrationConfig()
    damping_attenuation: float = 0.2

    def __post_init__(self):
        if self.sample_rate <= 0 or self.vibration.rotor_frequency <= 0:
            raise ValueError("rates must be positive")
        if not 0.0 < self.damping_attenuation <= 1.0:
            raise ValueError("damping_attenuation must be in (0, 1]")


@dataclass(frozen=True)
class ImuSample:
    accel: np.ndarray
    gyro: np.ndarray


# per-axis phase offsets of the vibration sinusoids
_VIB_PHASE = np.array([0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0])


def sample_imu(
    state: UavState,
    thrusts,
    t: float,
    config: ImuConfig,
    damped: bool,
    params: RigidBodyParams,
    rng: np.random.Generator | None = None,
) -> ImuSample:
    vib = config.vibration
    scale = config.damping_attenuation if damped else 1.0
    w = 2.0 * math.pi * vib.rotor_frequency * t
    shake = scale * (
        vib.amp_fundamental * np.sin(w + _VIB_PHASE)
        + vib.amp_second_harmonic * np.sin(2.0 * w + 2.0 * _VIB_PHASE)
    )
    accel = specific_force(state, thrusts, params) + shake
    gyro = state.body_rate.copy()
    if rng is not None:
        accel = accel + rng.normal(0.0, config.white_noise_sigma, 3)
        gyro = gyro + rng.normal(0.0, config.gyro_noise_sigma, 3)
    return ImuSample(accel, gyro)


ODOMETRY_KINDS = ("gnss", "slam", "vio")


@dataclass(frozen=True)
class OdometrySourceConfig:
    name: str
    kind: str = "gnss"
    rate: float = 10.0
    position_noise_sigma: float = 0.5
    heading_noise_sigma: float = 0.05
    drift_rate: float = 0.0  # m/s, vio only
    latency: float = 0.0
    dropout_probability: float = 0.0
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ODOMETRY_KINDS:
            raise ValueError(f"unknown odometry kind {self.kind!r}")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if not 0.0 <= self.dropout_probability <= 1.0:
            raise ValueError("dropout_probability outside [0, 1]")
        if self.position_noise_sigma < 0 or self.heading_noise_sigma < 0 or self.latency < 0:
            raise ValueError("sigmas and latency must be non-negative")


KIND_DEFAULTS = {
    "gnss": dict(rate=10.0, position_noise_sigma=0.5, heading_noise_sigma=0.05),
    "slam": dict(rate=20.0, position_noise_sigma=0.1, heading_noise_sigma=0.02, latency=0.05),
    "vio": dict(rate=30.0, position_noise_sigma=0.03, heading_noise_sigma=0.01, drift_rate=0.02,
                latency=0.02),
}


def default_source(name: str, kind: str, **overrides) -> OdometrySourceConfig:
    kw = dict(KIND_DEFAULTS[kind])
    kw.update(overrides)
    return OdometrySourceConfig(name=name, kind=kind, **kw)


@dataclass(frozen=True)
class OdometryMeasurement:
    source: str
    stamp: float
    available_at: float
    position: np.ndarray
    heading: float


class OdometrySource:
    """A noisy odometry stream with its own RNG, VIO drift state and latency queue."""

    def __init__(self, config: OdometrySourceConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.drift = np.zeros(3)
        self._pending: list[OdometryMeasurement] = []
        self._next_sample = 0.0

    def sample(self, truth: UavState, t: float) -> OdometryMeasurement | None:
        """Draw one measurement of ``truth`` at ``t``; ``None`` means dropout."""
        c = self.config
        if self.rng.random() < c.dropout_probability:
            return None
        if c.kind == "vio" and c.drift_rate > 0.0:
            self.drift = self.drift + self.rng.normal(0.0, c.drift_rate / c.rate, 3)
        pos = truth.position + np.asarray(c.bias) + self.drift
        if c.position_noise_sigma > 0:
            pos = pos + self.rng.normal(0.0, c.position_noise_sigma, 3)
        hdg = heading_of(truth.rotation)
        if c.heading_noise_sigma > 0:
            hdg = wrap_heading(hdg + self.rng.normal(0.0, c.heading_noise_sigma))
        return OdometryMeasurement(c.name, t, t + c.latency, pos, hdg)

    def tick(self, truth: UavState, t: float) -> list[OdometryMeasurement]:
        """Sample at the configured rate and return measurements whose latency has elapsed."""
        eps = 1e-9
        while self._next_sample <= t + eps:
            m = self.sample(truth, t)
            if m is not None:
                self._pending.append(m)
            self._next_sample += 1.0 / self.config.rate
        ready = [m for m in self._pending if m.available_at <= t + eps]
        self._pending = [m for m in self._pending if m.available_at > t + eps]
        return ready


def sample_odometry(source: OdometrySource, truth: UavState, t: float) -> OdometryMeasurement | None:
    return source.sample(truth, t)
