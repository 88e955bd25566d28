"""Geometry primitives, the heading convention and shared pipeline signal types.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` and rotations are
``(3, 3)`` world-from-body matrices.  Heading is the azimuth of the body
x-axis projected onto the world horizontal plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

G0 = 9.81
E3 = np.array([0.0, 0.0, 1.0])

# Below this horizontal norm the body x-axis is treated as vertical.
HEADING_EPS = 1e-6


class DegenerateHeading(ValueError):
    """The body x-axis is (numerically) vertical, so heading is undefined."""


def vec3(x=0.0, y=0.0, z=0.0) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def as_vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite vector {arr}")
    return arr


def wrap_heading(eta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(eta):
        raise ValueError("heading must be finite")
    r = math.fmod(eta + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def hat(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def cross3(a, b) -> np.ndarray:
    """3-vector cross product; much cheaper than ``np.cross`` for single vectors."""
    return np.array(
        (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(
        np.max(np.abs(r.T @ r - np.eye(3))) <= tol and abs(np.linalg.det(r) - 1.0) <= tol
    )


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Closest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def heading_of(r: np.ndarray) -> float:
    """Azimuth of the body x-axis projected onto the world horizontal plane."""
    bx = r[0, 0]
    by = r[1, 0]
    if math.hypot(bx, by) <= HEADING_EPS:
        raise DegenerateHeading("body x-axis is vertical; heading undefined")
    return wrap_heading(math.atan2(by, bx))


def so3_error(r: np.ndarray, r_d: np.ndarray) -> np.ndarray:
    """Attitude error ``1/2 (R^T R_d - R_d^T R)^vee``.

    Zero iff ``R == R_d``; swapping the arguments flips the sign.  Multiplying
    by a positive gain yields a body-rate command that rotates ``R`` toward
    ``R_d``.
    """
    return 0.5 * vee(r.T @ r_d - r_d.T @ r)


def rotation_from_thrust_heading(b3: np.ndarray, heading: float) -> np.ndarray:
    """Rotation whose body z-axis is ``b3`` and whose heading is exactly ``heading``.

    The body x-axis is chosen in the vertical plane containing the heading
    direction, so ``heading_of`` of the result returns ``heading``.
    """
    b3 = np.asarray(b3, dtype=float)
    b3 = b3 / np.linalg.norm(b3)
    if b3[2] <= 1e-9:
        raise DegenerateHeading("thrust direction is horizontal or pointing down")
    h = np.array([math.cos(heading), math.sin(heading), 0.0])
    b1 = h - (h @ b3) / b3[2] * E3
    b1 /= np.linalg.norm(b1)
    b2 = cross3(b3, b1)
    return np.column_stack((b1, b2, b3))


def rotation_to_quaternion(r: np.ndarray) -> tuple[float, float, float, float]:
    """(w, x, y, z) with w >= 0; used only for logging."""
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        w, x = 0.25 * s, (r[2, 1] - r[1, 2]) / s
        y, z = (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w, x = (r[2, 1] - r[1, 2]) / s, 0.25 * s
        y, z = (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w, x = (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s
        y, z = 0.25 * s, (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w, x = (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s
        y, z = (r[1, 2] + r[2, 1]) / s, 0.25 * s
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    return w, x, y, z


@dataclass
class UavState:
    position: np.ndarray = field(default_factory=vec3)
    velocity: np.ndarray = field(default_factory=vec3)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    body_rate: np.ndarray = field(default_factory=vec3)

    def copy(self) -> "UavState":
        return UavState(
            self.position.copy(), self.velocity.copy(), self.rotation.copy(), self.body_rate.copy()
        )

    @property
    def heading(self) -> float:
        return heading_of(self.rotation)


@dataclass(frozen=True)
class ReferenceCommand:
    position: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        object.__setattr__(self, "heading", wrap_heading(float(self.heading)))


@dataclass(frozen=True)
class FullStateReference:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    heading: float
    heading_rate: float

    def as_row(self) -> list[float]:
        return [
            *self.position.tolist(),
            *self.velocity.tolist(),
            *self.acceleration.tolist(),
            self.heading,
            self.heading_rate,
        ]


@dataclass(frozen=True)
class AttitudeRateCommand:
    thrust: float
    body_rate_setpoint: np.ndarray


@dataclass(frozen=True)
class MotorCommand:
    thrusts: np.ndarray
    feasible: bool = True

    def __len__(self) -> int:
        return len(self.thrusts)
