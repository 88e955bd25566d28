"""Geometric reference controller: full-state reference + estimate -> thrust and body rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    E3,
    G0,
    AttitudeRateCommand,
    FullStateReference,
    UavState,
    rotation_from_thrust_heading,
    so3_error,
)


class DegenerateForce(ValueError):
    pass


class UnknownProfile(KeyError):
    pass


@dataclass(frozen=True)
class ControllerGains:
    k_p: np.ndarray | float
    k_v: np.ndarray | float
    k_r: np.ndarray | float

    def __post_init__(self):
        for name in ("k_p", "k_v", "k_r"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,)).copy()
            if not np.all(v > 0):
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, v)


PROFILES = {
    "smooth": ControllerGains(2.0, 3.0, 6.0),
    "aggressive": ControllerGains(6.0, 6.0, 12.0),
}


def select_profile(name: str) -> ControllerGains:
    try:
        return PROFILES[name]
    except KeyError:
        raise UnknownProfile(f"unknown controller profile {name!r}; available: {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class ControlOutput:
    command: AttitudeRateCommand
    desired_acceleration: np.ndarray  # a_d, fed to the estimator
    desired_rotation: np.ndarray
    force: np.ndarray
    saturated: bool


def compute(ref: FullStateReference, est: UavState, gains: ControllerGains, mass: float,
            max_thrust: float = np.inf) -> ControlOutput:
    f_d = mass * (
        ref.acceleration
        + G0 * E3
        + gains.k_p * (ref.position - est.position)
        + gains.k_v * (ref.velocity - est.velocity)
    )
    norm = float(np.linalg.norm(f_d))
    if norm < 0.1 * mass * G0 or f_d[2] <= 0.0:
        raise DegenerateForce(f"desired force {f_d} is (near) free fall or points down")
    rot = est.rotation
    thrust = float(f_d @ rot[:, 2])
    clamped = min(max(thrust, 0.0), max_thrust)
    r_d = rotation_from_thrust_heading(f_d / norm, ref.heading)
    omega = gains.k_r * so3_error(rot, r_d) + ref.heading_rate * E3
    a_d = f_d / mass - G0 * E3
    return ControlOutput(AttitudeRateCommand(clamped, omega), a_d, r_d, f_d, clamped != thrust)
