"""Blinking-ID sequence sets, phase-free decoding and bearing-based relative localization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import UavState, rot_y, rot_z


class LengthMismatch(ValueError):
    pass


class NotVisible(Exception):
    pass


class NoMatch(Exception):
    pass


class Ambiguous(Exception):
    pass


Bits = tuple[int, ...]


@dataclass(frozen=True)
class SequenceSetParams:
    length: int
    max_off_run: int

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("length must be at least 2")
        if not 1 <= self.max_off_run < self.length:
            raise ValueError("max_off_run must satisfy 1 <= max_off_run < length")


def as_bits(seq) -> Bits:
    if isinstance(seq, str):
        if set(seq) - {"0", "1"}:
            raise ValueError(f"not a binary string: {seq!r}")
        return tuple(int(c) for c in seq)
    bits = tuple(int(b) for b in seq)
    if any(b not in (0, 1) for b in bits):
        raise ValueError(f"not a binary sequence: {seq!r}")
    return bits


def to_str(bits) -> str:
    return "".join(str(b) for b in as_bits(bits))


def rotations(bits) -> list[Bits]:
    bits = as_bits(bits)
    return [bits[k:] + bits[:k] for k in range(len(bits))]


def canonical(bits) -> Bits:
    """Lexicographically smallest rotation."""
    return min(rotations(bits))


def max_circular_zero_run(bits) -> int:
    bits = as_bits(bits)
    n = len(bits)
    if not any(bits):
        return n
    # start right after a one so no run wraps
    start = bits.index(1) + 1
    best = run = 0
    for k in range(n):
        if bits[(start + k) % n] == 0:
            run += 1
            best = max(best, run)
        else:
            run = 0
    return best


def circular_hamming(a, b) -> int:
    a, b = as_bits(a), as_bits(b)
    if len(a) != len(b):
        raise LengthMismatch(f"lengths differ: {len(a)} vs {len(b)}")
    return min(sum(x != y for x, y in zip(a, r)) for r in rotations(b))


def _necklaces(n: int):
    """Binary necklaces (canonical rotations) of length n, in lexicographic order.

    Fredricksen-Kessler-Maiorana: emit the prefix when its length divides n.
    """
    a = [0] * (n + 1)

    def gen(t, p):
        if t > n:
            if n % p == 0:
                yield tuple(a[1:n + 1])
            return
        a[t] = a[t - p]
        yield from gen(t + 1, p)
        if a[t - p] == 0:
            a[t] = 1
            yield from gen(t + 1, t)

    yield from gen(1, 1)


@lru_cache(maxsize=None)
def _generate(length: int, max_off_run: int) -> tuple[Bits, ...]:
    return tuple(
        s for s in _necklaces(length) if any(s) and max_circular_zero_run(s) <= max_off_run
    )


def generate_set(params: SequenceSetParams) -> list[Bits]:
    """One canonical representative per admissible rotation class, sorted."""
    return list(_generate(params.length, params.max_off_run))


def encode(seq, frame_index: int) -> bool:
    bits = as_bits(seq)
    return bool(bits[frame_index % len(bits)])


class Decoder:
    """Maps any rotation of a set member back to the member's id (its index)."""

    def __init__(self, members):
        self.members = [as_bits(m) for m in members]
        if not self.members:
            raise ValueError("empty sequence set")
        self.length = len(self.members[0])
        self._table: dict[Bits, set[int]] = {}
        for i, m in enumerate(self.members):
            if len(m) != self.length:
                raise LengthMismatch("set members have different lengths")
            for r in rotations(m):
                self._table.setdefault(r, set()).add(i)

    def __call__(self, window) -> int:
        w = as_bits(window)
        if len(w) != self.length:
            raise LengthMismatch(f"window length {len(w)} != {self.length}")
        hits = self._table.get(w)
        if not hits:
            raise NoMatch(f"window {to_str(w)} matches no member")
        if len(hits) > 1:
            raise Ambiguous(f"window {to_str(w)} matches members {sorted(hits)}")
        return next(iter(hits))


def decode(window, members) -> int:
    return Decoder(members)(window)


def export_set(params: SequenceSetParams, members=None) -> str:
    members = generate_set(params) if members is None else members
    lines = [f"L={params.length} max_off_run={params.max_off_run}"]
    lines += [to_str(m) for m in members]
    return "\n".join(lines) + "\n"


def read_set(path_or_text) -> tuple[SequenceSetParams, list[Bits]]:
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    head = dict(kv.split("=") for kv in lines[0].split())
    params = SequenceSetParams(int(head["L"]), int(head["max_off_run"]))
    return params, [as_bits(ln) for ln in lines[1:]]


# -- relative localization ------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    fov: float = math.radians(120.0)  # horizontal and vertical
    resolution: int = 752  # px across the field of view
    pixel_noise_sigma: float = 1.0  # px
    mount_yaw: float = 0.0  # rad, camera boresight relative to body x about body z
    mount_pitch: float = 0.0  # rad, boresight elevation above the body xy plane

    @property
    def focal(self) -> float:
        return 0.5 * self.resolution / math.tan(0.5 * self.fov)

    @property
    def mount(self) -> np.ndarray:
        """Camera-to-body rotation."""
        return rot_z(self.mount_yaw) @ rot_y(-self.mount_pitch)


@dataclass(frozen=True)
class RelativePoseEstimate:
    mean: np.ndarray  # observer body frame
    covariance: np.ndarray
    observed_id: int = -1


def _project(c_body: np.ndarray, f: float) -> tuple[float, float]:
    # camera looks along body +x; image u to the left (+y), v up (+z)
    return f * c_body[1] / c_body[0], f * c_body[2] / c_body[0]


def _invert(pix: np.ndarray, baseline: float, f: float) -> np.ndarray:
    """Relative position from the two marker pixels (u1, v1, u2, v2)."""
    d1 = np.array([1.0, pix[0] / f, pix[1] / f])
    d2 = np.array([1.0, pix[2] / f, pix[3] / f])
    d1 /= np.linalg.norm(d1)
    d2 /= np.linalg.norm(d2)
    alpha = math.acos(min(1.0, max(-1.0, float(d1 @ d2))))
    rng = baseline / (2.0 * math.tan(0.5 * alpha))
    bearing = d1 + d2
    bearing /= np.linalg.norm(bearing)
    return rng * bearing


def marker_pixels(observer: UavState, target: UavState, baseline: float, camera: CameraModel) -> np.ndarray:
    """Noise-free pixel coordinates (u1, v1, u2, v2) of the target's two markers.

    The markers sit at +/- baseline/2 along the horizontal direction
    perpendicular to the line of sight, so they always appear side by side.
    """
    rel_w = target.position - observer.position
    horiz = np.array([-rel_w[1], rel_w[0], 0.0])
    n = np.linalg.norm(horiz)
    if n < 1e-9:
        raise NotVisible("target directly above or below")
    horiz /= n
    rt = camera.mount.T @ observer.rotation.T
    f = camera.focal
    half = math.tan(0.5 * camera.fov)
    out = []
    for s in (1.0, -1.0):
        c = rt @ (rel_w + s * 0.5 * baseline * horiz)
        if c[0] <= 0.0:
            raise NotVisible("target behind the camera")
        if abs(c[1] / c[0]) > half or abs(c[2] / c[0]) > half:
            raise NotVisible("target outside the field of view")
        out.extend(_project(c, f))
    pix = np.array(out)
    if math.hypot(pix[0] - pix[2], pix[1] - pix[3]) < 2.0:
        raise NotVisible("marker separation below two pixels")
    return pix


def observe(observer: UavState, target: UavState, marker_baseline: float,
            camera: CameraModel = CameraModel(), rng: np.random.Generator | None = None,
            observed_id: int = -1) -> RelativePoseEstimate:
    """Relative position of ``target`` in the observer body frame with first-order covariance."""
    pix = marker_pixels(observer, target, marker_baseline, camera)
    sigma = camera.pixel_noise_sigma
    if rng is not None and sigma > 0:
        pix = pix + rng.normal(0.0, sigma, 4)
    f = camera.focal
    mean = _invert(pix, marker_baseline, f)
    jac = np.empty((3, 4))
    h = 1e-4
    for k in range(4):
        dp = np.zeros(4)
        dp[k] = h
        jac[:, k] = (_invert(pix + dp, marker_baseline, f) - _invert(pix - dp, marker_baseline, f)) / (2 * h)
    cov = sigma * sigma * jac @ jac.T
    cov = 0.5 * (cov + cov.T)
    if camera.mount_yaw != 0.0 or camera.mount_pitch != 0.0:
        m = camera.mount
        mean, cov = m @ mean, m @ cov @ m.T
    return RelativePoseEstimate(mean, cov, observed_id)


def ring_cameras(count: int = 3, vertical: bool = False, **kw) -> list[CameraModel]:
    """``count`` identical cameras spread evenly in yaw around the body.

    With ``vertical`` an upward and a downward camera are added, so together
    with a ring of three 120 degree cameras every direction is covered except
    targets straddling a seam between two fields of view.
    """
    cams = [CameraModel(mount_yaw=2.0 * math.pi * k / count, **kw) for k in range(count)]
    if vertical:
        cams += [CameraModel(mount_pitch=s * 0.5 * math.pi, **kw) for s in (1.0, -1.0)]
    return cams


def observe_any(observer: UavState, target: UavState, marker_baseline: float,
                cameras: list[CameraModel], rng: np.random.Generator | None = None,
                observed_id: int = -1) -> RelativePoseEstimate:
    """Observation from the first camera that sees the target."""
    for cam in cameras:
        try:
            marker_pixels(observer, target, marker_baseline, cam)
        except NotVisible:
            continue
        return observe(observer, target, marker_baseline, cam, rng, observed_id)
    raise NotVisible("no camera sees the target")
