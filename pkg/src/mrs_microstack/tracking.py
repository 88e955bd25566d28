"""MPC reference tracker with trajectory exchange and priority-based mutual avoidance.

Each translational axis is a triple integrator (position, velocity,
acceleration) driven by jerk; heading is a double integrator driven by
heading acceleration.  A condensed QP over a 40 x 0.2 s horizon is solved by
ADMM with cached factorisations.  Between replans the plan's jerk is applied
at 100 Hz through a feasibility governor, so every emitted sample satisfies
the box limits exactly even when the QP is solved inexactly.

All solver state lives in arrays with one row per integrator chain, which lets
:class:`TrackerBank` run thousands of independent trackers through the same
code path as a single :class:`MpcTracker`.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import FullStateReference, ReferenceCommand, UavState, heading_of, wrap_heading

log = logging.getLogger(__name__)

TICK = 0.01
HORIZON = 40
MPC_STEP = 0.2


class SolverFailure(RuntimeError):
    pass


class NotInitialized(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackerConstraints:
    v_max_h: float = 2.0
    v_max_v: float = 1.0
    a_max_h: float = 2.0
    a_max_v: float = 1.0
    j_max: float = 10.0
    heading_rate_max: float = 1.0
    heading_accel_max: float = 2.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{k} must be positive, got {v}")
        if min(self.a_max_h, self.a_max_v) < self.j_max * TICK:
            raise ValueError("a_max must be at least j_max * tick for the governor to stay feasible")

    def axis_limits(self, v_scale_h: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = np.array([self.v_max_h * v_scale_h, self.v_max_h * v_scale_h, self.v_max_v])
        a = np.array([self.a_max_h, self.a_max_h, self.a_max_v])
        j = np.full(3, self.j_max)
        return v, a, j


@dataclass(frozen=True)
class AvoidanceConfig:
    r_min: float = 1.5
    trigger_radius: float = 4.0
    altitude_offset: float = 2.0
    enabled: bool = True
    stale_timeout: float = 2.0
    clear_time: float = 2.0
    # a conflicting neighbour that went silent is forgotten only after this long
    forget_timeout: float = 10.0

    def __post_init__(self):
        if not self.trigger_radius > self.r_min > 0:
            raise ValueError("require trigger_radius > r_min > 0")


# -- wire format ----------------------------------------------------------------

_TRAJ_HEADER = struct.Struct("<HBdfH")


@dataclass(frozen=True)
class PredictedTrajectory:
    uav_id: int
    priority: int
    start_time: float
    dt: float
    points: np.ndarray  # (n, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(pts) < 2:
            raise ValueError("a trajectory needs at least two points")

    @property
    def end_time(self) -> float:
        return self.start_time + (len(self.points) - 1) * self.dt

    def position_at(self, t: np.ndarray) -> np.ndarray:
        """Linear interpolation of points at times ``t`` (clamped to the span)."""
        s = (np.asarray(t, dtype=float) - self.start_time) / self.dt
        s = np.clip(s, 0.0, len(self.points) - 1)
        i = np.minimum(s.astype(int), len(self.points) - 2)
        f = (s - i)[..., None]
        return self.points[i] * (1.0 - f) + self.points[i + 1] * f

    def spacing_ok(self, constraints: TrackerConstraints, slack: float = 1.01) -> bool:
        d = np.abs(np.diff(self.points, axis=0))
        lim_h = constraints.v_max_h * self.dt * slack
        lim_v = constraints.v_max_v * self.dt * slack
        return bool(np.all(d[:, :2] <= lim_h) and np.all(d[:, 2] <= lim_v))

    def decimated(self, max_points: int) -> "PredictedTrajectory":
        """Every k-th point, with k the smallest stride that fits ``max_points``."""
        if max_points < 2:
            raise ValueError("need at least two points")
        n = len(self.points)
        if n <= max_points:
            return self
        stride = math.ceil((n - 1) / (max_points - 1))
        return PredictedTrajectory(self.uav_id, self.priority, self.start_time, self.dt * stride,
                                   self.points[::stride])

    def encode(self) -> bytes:
        head = _TRAJ_HEADER.pack(self.uav_id, self.priority, self.start_time, self.dt, len(self.points))
        return head + self.points.astype("<f4").tobytes()

    @classmethod
    def decode(cls, data: bytes) -> "PredictedTrajectory":
        uav_id, prio, t0, dt, n = _TRAJ_HEADER.unpack_from(data)
        body = data[_TRAJ_HEADER.size:]
        if len(body) != 12 * n:
            raise ValueError(f"trajectory record: expected {12 * n} payload bytes, got {len(body)}")
        pts = np.frombuffer(body, dtype="<f4").astype(float).reshape(n, 3)
        return cls(uav_id, prio, t0, float(dt), pts)


def encoded_size(points: int = HORIZON) -> int:
    return _TRAJ_HEADER.size + 12 * points


# -- condensed QP over an integrator chain -------------------------------------------


@dataclass(frozen=True)
class MpcWeights:
    """Per-derivative stage and terminal weights (position first) and input weight.

    The stage velocity weight damps the approach so the position error does
    not overshoot; chains shorter than three use the leading entries.
    """

    stage: tuple[float, ...] = (1.0, 0.5, 0.02)
    terminal: tuple[float, ...] = (20.0, 20.0, 20.0)
    input: float = 2e-3


class ChainQP:
    """Condensed QP for a chain of ``order`` integrators with piecewise-constant input.

    Minimises stage and terminal tracking error plus input energy subject to
    box limits on every derivative and on the input.  The decision variable is
    the highest state derivative at the horizon nodes rather than the input
    itself: the input is then a first difference, and the Hessian condition
    number drops by almost three orders of magnitude, which is what makes a
    fixed ADMM iteration budget sufficient.
    """

    def __init__(self, order: int, horizon: int = HORIZON, step: float = MPC_STEP,
                 weights: MpcWeights | None = None, rho: float = 0.03, sigma: float = 1e-6,
                 alpha: float = 1.6):
        self.order, self.horizon, self.step = order, horizon, step
        n, h, T = order, horizon, step
        w = weights or MpcWeights()
        phi = np.zeros((n, n))
        for i in range(n):
            for j in range(i, n):
                phi[i, j] = T ** (j - i) / math.factorial(j - i)
        gam = np.array([T ** (n - i) / math.factorial(n - i) for i in range(n)])
        # state at node k (k = 1..h): sx[k-1] @ x0 + su[k-1] @ u
        sx = np.zeros((h, n, n))
        su = np.zeros((h, n, h))
        pk = np.eye(n)
        for k in range(1, h + 1):
            pk = phi @ pk
            sx[k - 1] = pk
            if k > 1:
                su[k - 1, :, : k - 1] = phi @ su[k - 2, :, : k - 1]
            su[k - 1, :, k - 1] = gam
        self.sx, self.su = sx, su
        self.free = [sx[:, d, :].T for d in range(n)]  # free response of derivative d: x0 @ free[d]
        self.node_t = T * np.arange(1, h + 1)

        # cost in terms of the input u: 1/2 u'Pu + (x0 @ qx) u, position taken relative to the target
        pu = w.input * np.eye(h)
        qx = np.zeros((n, h))
        for d in range(n):
            g = su[:, d, :]
            pu += w.stage[d] * g.T @ g + w.terminal[d] * np.outer(g[-1], g[-1])
            qx += w.stage[d] * sx[:, d, :].T @ g + w.terminal[d] * np.outer(sx[-1, d, :], g[-1])

        # u = w @ m.T + x0 @ nmap, with w the top state derivative at nodes 1..h
        m = (np.eye(h) - np.eye(h, k=-1)) / T
        nmap = np.zeros((n, h))
        nmap[n - 1, 0] = -1.0 / T
        self.m, self.nmap = m, nmap

        c_raw = np.vstack([np.eye(h)] + [su[:, d, :] for d in range(1, n)])
        cw = c_raw @ m
        self.row_scale = 1.0 / np.linalg.norm(cw, axis=1)
        self.c = cw * self.row_scale[:, None]
        self.c_off = nmap @ c_raw.T  # constraint offset: x0 @ c_off

        pw = m.T @ pu @ m
        scale = 1.0 / np.max(np.diag(pw))
        self.p_mat = pw * scale
        self.q_x = (nmap @ pu @ m + qx @ m) * scale
        self.rho, self.sigma, self.alpha = rho, sigma, alpha
        kkt = self.p_mat + sigma * np.eye(h) + rho * self.c.T @ self.c
        self.k_inv = np.linalg.inv(kkt)
        kt = self.k_inv.T
        self._f4 = tuple(a.astype(np.float32) for a in (self.c.T, self.c, self.p_mat, sigma * kt, self.c @ kt, kt))

    def bounds(self, x0: np.ndarray, limits: np.ndarray, margin: float = 0.99):
        """Scaled lower/upper constraint bounds for rows ``x0`` (R, n) and ``limits`` (R, n).

        ``limits[:, d]`` bounds derivative ``d`` (d >= 1) and ``limits[:, 0]`` the
        input.  A derivative already beyond its limit gets a bound that decays at
        the rate the next derivative allows, keeping the problem feasible.  State
        limits are shrunk by ``margin`` so inexact solutions stay admissible.
        """
        n, h = self.order, self.horizon
        inp = limits[:, 0:1]
        lo = [np.broadcast_to(-inp, (len(x0), h))]
        hi = [np.broadcast_to(inp, (len(x0), h))]
        for d in range(1, n):
            nxt = limits[:, d + 1] if d + 1 < n else limits[:, 0]
            lim = np.maximum(margin * limits[:, d:d + 1], np.abs(x0[:, d:d + 1]) - nxt[:, None] * self.node_t)
            f = x0 @ self.free[d]
            lo.append(-lim - f)
            hi.append(lim - f)
        off = x0 @ self.c_off
        lo = (np.hstack(lo) - off) * self.row_scale
        hi = (np.hstack(hi) - off) * self.row_scale
        return lo, hi

    def to_input(self, x0: np.ndarray, w: np.ndarray) -> np.ndarray:
        return w @ self.m.T + x0 @ self.nmap

    def cold_start(self, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = np.repeat(x0[:, -1:], self.horizon, axis=1)
        return w, np.zeros((len(x0), self.c.shape[0]))

    def shift(self, warm, steps: int):
        """Shift a warm start forward by ``steps`` nodes, holding the last value."""
        w, y = warm
        if steps <= 0:
            return warm
        h = self.horizon
        steps = min(steps, h)
        w2 = np.empty_like(w)
        w2[:, : h - steps] = w[:, steps:]
        w2[:, h - steps:] = w[:, -1:]
        y2 = np.zeros_like(y)
        for blk in range(self.order):
            a, b = h * blk, h * (blk + 1)
            y2[:, a:b - steps] = y[:, a + steps:b]
        return w2, y2

    def solve(self, x0, target, limits, warm=None, max_iter: int = 200, tol: float = 1e-4):
        """Return (u, (w, y), iterations) for rows of initial states and targets.

        Iterates run in single precision; the governor downstream enforces the
        limits exactly, so the QP only has to be accurate to ``tol``.  Rows are
        checked every 20 iterations and dropped from the sweep once their
        primal and dual residuals are below ``tol``.
        """
        f4 = np.float32
        # the cost only sees the position error, so a common offset cancels exactly
        xe = x0.copy()
        xe[:, 0] -= target
        q = (xe @ self.q_x).astype(f4)
        lo, hi = (b.astype(f4) for b in self.bounds(x0, limits))
        w, y = self.cold_start(x0) if warm is None else warm
        w, y = w.astype(f4), y.astype(f4)
        ct, c, pm, ksig, ck, kt = self._f4
        rho, alpha = f4(self.rho), f4(self.alpha)
        beta, inv_rho = f4(1.0 - self.alpha), f4(1.0 / self.rho)
        rows = np.arange(len(w))
        cw, cy, cq, clo, chi = w.copy(), y.copy(), q, lo, hi
        cz = np.clip(cw @ ct, clo, chi)
        cqk = cq @ kt
        it = 0
        for it in range(1, max_iter + 1):
            t = cz * rho
            t -= cy
            wt = t @ ck
            wt += cw @ ksig
            wt -= cqk
            zr = wt @ ct
            zr *= alpha
            t = cz * beta
            zr += t
            cw *= beta
            wt *= alpha
            cw += wt
            np.multiply(cy, inv_rho, out=t)
            t += zr
            np.maximum(t, clo, out=t)
            np.minimum(t, chi, out=t)
            zr -= t
            zr *= rho
            cy += zr
            cz = t
            if it % 20 == 0 or it == max_iter:
                prim = np.max(np.abs(cw @ ct - cz), axis=1)
                dual = np.max(np.abs(cw @ pm + cq + cy @ c), axis=1)
                done = (prim < tol) & (dual < tol) if it < max_iter else np.ones(len(rows), bool)
                if done.any():
                    w[rows[done]], y[rows[done]] = cw[done], cy[done]
                    keep = ~done
                    rows = rows[keep]
                    if rows.size == 0:
                        break
                    cw, cy, cz, cq, cqk = cw[keep], cy[keep], cz[keep], cq[keep], cqk[keep]
                    clo, chi = clo[keep], chi[keep]
        if not np.all(np.isfinite(w)):
            raise SolverFailure("QP iterates diverged")
        return self.to_input(x0, w.astype(np.float64)), (w, y), it

    def predict(self, x0: np.ndarray, u: np.ndarray, deriv: int = 0) -> np.ndarray:
        """Planned derivative ``deriv`` at nodes 0..h (R, h+1)."""
        nodes = x0 @ self.free[deriv] + u @ self.su[:, deriv, :].T
        return np.hstack((x0[:, deriv:deriv + 1], nodes))


@lru_cache(maxsize=None)
def _qp(order: int) -> ChainQP:
    return ChainQP(order)


# -- feasibility governor -----------------------------------------------------------


def _envelope_root(c, jmax, tau):
    """Solve s|s|/(2J) + s*tau/2 + c = 0 for s (monotone in s)."""
    pos = jmax * (-0.5 * tau + np.sqrt(np.maximum(0.25 * tau * tau - 2.0 * c / jmax, 0.0)))
    neg = jmax * (0.5 * tau - np.sqrt(0.25 * tau * tau + 2.0 * np.maximum(c, 0.0) / jmax))
    return np.where(c <= 0.0, pos, neg)


def govern3(p, v, a, j_des, vmax, amax, jmax, tau=TICK):
    """Advance triple integrators one tick with the closest admissible jerk.

    Admissible means the end state keeps |a| <= amax, |v| <= vmax and the
    braking envelope v + a|a|/(2 jmax) inside [-vmax, vmax], so the velocity
    limit can still be respected on later ticks.  Returns (p, v, a, j,
    infeasible_mask).
    """
    lo = np.maximum(-jmax, (-amax - a) / tau)
    hi = np.minimum(jmax, (amax - a) / tau)
    c0 = v + a * tau
    k = 2.0 / (tau * tau)
    lo = np.maximum(lo, (-vmax - c0) * k)
    hi = np.minimum(hi, (vmax - c0) * k)
    base = c0 - 0.5 * a * tau
    hi = np.minimum(hi, (_envelope_root(base - vmax, jmax, tau) - a) / tau)
    lo = np.maximum(lo, (_envelope_root(base + vmax, jmax, tau) - a) / tau)
    # on the envelope boundary lo and hi coincide up to round-off
    crossed = lo > hi
    bad = lo > hi + 1e-9 * jmax
    j = np.where(crossed, np.clip(0.5 * (lo + hi), -jmax, jmax), np.clip(j_des, lo, hi))
    p = p + v * tau + a * (0.5 * tau * tau) + j * (tau ** 3 / 6.0)
    v = c0 + j * (0.5 * tau * tau)
    a = a + j * tau
    return p, v, a, j, bad


def govern2(x, r, u_des, rmax, umax, tau=TICK):
    """Double-integrator version: keeps |r| <= rmax with |u| <= umax."""
    lo = np.maximum(-umax, (-rmax - r) / tau)
    hi = np.minimum(umax, (rmax - r) / tau)
    crossed = lo > hi
    bad = lo > hi + 1e-9 * umax
    u = np.where(crossed, np.clip(0.5 * (lo + hi), -umax, umax), np.clip(u_des, lo, hi))
    x = x + r * tau + u * (0.5 * tau * tau)
    r = r + u * tau
    return x, r, u, bad


def _planar_caps(want, need, cap):
    """Per-axis velocity bounds for (x, y) pairs whose Euclidean norm stays within ``cap``.

    ``need`` is what each axis must be allowed so it can still brake (its speed
    and braking envelope), ``want`` its box limit.  Each pair gets
    ``need + lam * (want - need)`` with the largest ``lam`` in [0, 1] whose norm
    fits.  If the governor keeps every axis inside its bound, the envelopes of
    the next tick again fit the cap, so the horizontal speed never exceeds it.
    """
    d = want - need
    a = np.sum(d * d, axis=1)
    b = 2.0 * np.sum(need * d, axis=1)
    c = np.sum(need * need, axis=1) - cap * cap
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    lam = np.where(a > 0.0, (-b + disc) / (2.0 * np.where(a > 0.0, a, 1.0)), 1.0)
    lam = np.clip(np.where(c >= 0.0, 0.0, lam), 0.0, 1.0)
    return need + lam[:, None] * d


class ChainBank:
    """Rows of independent integrator chains sharing one replan schedule.

    With ``planar`` the rows are (x, y, z) triples and the x/y velocity bounds
    are coupled so the horizontal speed stays within the norm of the x/y limits.
    """

    def __init__(self, order: int, x0: np.ndarray, limits: np.ndarray, now: float,
                 replan_period: float = MPC_STEP, planar: bool = False):
        self.order = order
        self.planar = planar
        self.qp = _qp(order)
        self.x = np.array(x0, dtype=float).reshape(-1, order)
        self.limits = np.array(limits, dtype=float).reshape(len(self.x), order)
        self.target = self.x[:, 0].copy()
        self.now = now
        self.replan_period = replan_period
        self.plan_t0 = now
        self.plan_x0 = self.x.copy()
        self.u = np.zeros((len(self.x), self.qp.horizon))
        self._warm = None
        self.dirty = True
        self.infeasible_ticks = 0
        self.solves = 0

    def set_target(self, target: np.ndarray):
        target = np.asarray(target, dtype=float).reshape(len(self.x))
        if not np.array_equal(target, self.target):
            self.target = target.copy()
            self.dirty = True

    def set_limits(self, limits: np.ndarray):
        limits = np.asarray(limits, dtype=float).reshape(self.limits.shape)
        if not np.array_equal(limits, self.limits):
            self.limits = limits.copy()
            self.dirty = True

    def replan(self):
        warm = self._warm
        if warm is not None:
            warm = self.qp.shift(warm, int(round((self.now - self.plan_t0) / self.qp.step)))
        u, self._warm, _ = self.qp.solve(self.x, self.target, self.limits, warm)
        self.u = u
        self.plan_t0 = self.now
        self.plan_x0 = self.x.copy()
        self.dirty = False
        self.solves += 1

    def tick(self, tau: float = TICK):
        if self.dirty or self.now - self.plan_t0 >= self.replan_period - 1e-9:
            self.replan()
        k = int((self.now - self.plan_t0) / self.qp.step + 1e-9)
        u = self.u[:, k] if k < self.qp.horizon else np.zeros(len(self.x))
        if self.order == 3:
            p, v, a = self.x[:, 0], self.x[:, 1], self.x[:, 2]
            jmax = self.limits[:, 0]
            # a limit that was tightened below the current state relaxes until reachable
            amax = np.maximum(self.limits[:, 2], np.abs(a))
            need = np.maximum(np.abs(v), np.abs(v + a * np.abs(a) / (2.0 * jmax)))
            vmax = np.maximum(self.limits[:, 1], need)
            if self.planar:
                vmax = vmax.reshape(-1, 3)
                lim = self.limits[:, 1].reshape(-1, 3)
                cap = np.hypot(lim[:, 0], lim[:, 1])
                vmax[:, :2] = _planar_caps(vmax[:, :2], need.reshape(-1, 3)[:, :2], cap)
                vmax = vmax.ravel()
            p, v, a, _, bad = govern3(p, v, a, u, vmax, amax, jmax, tau)
            self.x = np.column_stack((p, v, a))
        else:
            x, r = self.x[:, 0], self.x[:, 1]
            rmax = np.maximum(self.limits[:, 1], np.abs(r))
            x, r, _, bad = govern2(x, r, u, rmax, self.limits[:, 0], tau)
            self.x = np.column_stack((x, r))
        self.infeasible_ticks += int(np.count_nonzero(bad))
        self.now += tau

    def planned_positions(self, now: float) -> np.ndarray:
        """Planned position at now + k*step, k = 0..h-1 (R, h)."""
        pos = self.qp.predict(self.plan_x0, self.u, 0)
        t = self.plan_t0 + self.qp.step * np.arange(self.qp.horizon + 1)
        want = now + self.qp.step * np.arange(self.qp.horizon)
        out = np.empty((len(self.x), self.qp.horizon))
        for i in range(len(self.x)):
            out[i] = np.interp(want, t, pos[i])
        # the plan may be older than one step; splice in the current state at k = 0
        out[:, 0] = self.x[:, 0]
        return out


def _translation_limits(c: TrackerConstraints, v_scale_h: float = 1.0) -> np.ndarray:
    v, a, j = c.axis_limits(v_scale_h)
    return np.column_stack((j, v, a))


# smallest share of the horizontal limits an axis keeps when shaping
_MIN_AXIS_SHARE = 0.1


def shaped_limits(c: TrackerConstraints, delta: np.ndarray, v_scale_h: float = 1.0) -> np.ndarray:
    """Translation limits (rows j, v, a per axis) shaped along the horizontal travel direction.

    The x/y velocity and acceleration boxes are split in proportion to the
    horizontal displacement ``delta`` (rows of (dx, dy, ...)), with their
    Euclidean norm kept at the configured horizontal limit.  Decoupled axes
    then move along a straight line instead of bending where one axis
    saturates first, and the shaped boxes never exceed the configured ones.
    Returns shape (R, 3, 3) for ``delta`` of shape (R, >=2).
    """
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    base = _translation_limits(c, v_scale_h)
    out = np.repeat(base[None], len(delta), axis=0)
    d = np.abs(delta[:, :2])
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    share = np.where(norm > 1e-9, d / np.where(norm > 1e-9, norm, 1.0), np.sqrt(0.5))
    share = np.maximum(share, _MIN_AXIS_SHARE)
    share /= np.linalg.norm(share, axis=1, keepdims=True)
    out[:, :2, 1] *= share
    out[:, :2, 2] *= share
    return out


def _heading_limits(c: TrackerConstraints) -> np.ndarray:
    return np.array([[c.heading_accel_max, c.heading_rate_max]])


# -- single-UAV tracker ----------------------------------------------------------


@dataclass
class AvoidanceStatus:
    active: bool = False
    level: int = 0
    last_conflict: float = -math.inf
    conflicts_with: tuple[int, ...] = ()
    stale_dropped: int = 0
    activations: int = 0


class MpcTracker:
    """Turns sparse position/heading references into a feasible 100 Hz full-state reference."""

    def __init__(self, constraints: TrackerConstraints | None = None, uav_id: int = 0,
                 priority: int = 0, avoidance: AvoidanceConfig | None = None,
                 replan_period: float = MPC_STEP):
        self.constraints = constraints or TrackerConstraints()
        self.uav_id = uav_id
        self.priority = priority
        self.avoidance = avoidance
        self.replan_period = replan_period
        self._trans: ChainBank | None = None
        self._head: ChainBank | None = None
        self._reference: ReferenceCommand | None = None
        self._heading_target = 0.0
        self.neighbors: dict[int, PredictedTrajectory] = {}
        self._higher_known: set[int] = set()
        self._last_heard: dict[int, float] = {}
        self._neighbors_dirty = False
        self.status = AvoidanceStatus()
        self._last_output: FullStateReference | None = None
        self._scale = None

    # -- commands
    def set_reference(self, cmd: ReferenceCommand):
        self._reference = cmd
        if self._trans is not None:
            self._apply_targets()

    @property
    def reference(self) -> ReferenceCommand | None:
        return self._reference

    @property
    def reference_offset(self) -> np.ndarray:
        """Displacement avoidance currently adds to the commanded position."""
        out = np.zeros(3)
        if self.status.active:
            out[2] = self.status.level * self.avoidance.altitude_offset
        return out

    @property
    def initialized(self) -> bool:
        return self._trans is not None

    def _initialize(self, est: UavState, now: float):
        c = self.constraints
        x0 = np.column_stack((est.position, est.velocity, np.zeros(3)))
        x0[2, 1] = np.clip(x0[2, 1], -c.v_max_v, c.v_max_v)
        vh = math.hypot(x0[0, 1], x0[1, 1])
        if vh > c.v_max_h:
            x0[:2, 1] *= c.v_max_h / vh
        self._trans = ChainBank(3, x0, shaped_limits(c, np.zeros((1, 3)))[0], now, self.replan_period,
                                planar=True)
        self._trans.target[:] = np.nan  # force shaping on the first target
        try:
            eta = heading_of(est.rotation)
        except ValueError:
            eta = 0.0
        self._head = ChainBank(2, [[eta, 0.0]], _heading_limits(c), now, self.replan_period)
        if self._reference is None:
            self._reference = ReferenceCommand(est.position.copy(), eta)
        self._apply_targets()

    def _apply_targets(self):
        ref = self._reference
        target = ref.position + self.reference_offset
        scale = 0.5 if self.status.active else 1.0
        if not np.array_equal(target, self._trans.target) or self._scale != scale:
            self._scale = scale
            delta = target - self._trans.x[:, 0]
            self._trans.set_target(target)
            self._trans.set_limits(shaped_limits(self.constraints, delta, scale)[0])
        eta = float(self._head.x[0, 0])
        self._head.set_target([eta + wrap_heading(ref.heading - wrap_heading(eta))])

    # -- main loop
    def update(self, estimate: UavState | None, now: float) -> FullStateReference:
        if self._trans is None:
            if estimate is None:
                raise NotInitialized("first update needs an estimate")
            self._initialize(estimate, now)
        else:
            n = int(round((now - self._trans.now) / TICK))
            if n < 0:
                raise ValueError("time went backwards")
            for _ in range(n):
                self._avoidance_tick()
                if self._trans.dirty or self._trans.now - self._trans.plan_t0 >= self.replan_period - 1e-9:
                    self._refresh_heading_target()
                try:
                    self._trans.tick()
                    self._head.tick()
                except SolverFailure:
                    log.warning("uav %s: MPC solve failed, holding last output", self.uav_id)
                    if self._last_output is not None:
                        return self._last_output
                    raise
        out = self.output()
        self._last_output = out
        return out

    def _refresh_heading_target(self):
        eta = float(self._head.x[0, 0])
        self._head.set_target([eta + wrap_heading(self._reference.heading - wrap_heading(eta))])

    def output(self) -> FullStateReference:
        x = self._trans.x
        h = self._head.x[0]
        return FullStateReference(
            x[:, 0].copy(), x[:, 1].copy(), x[:, 2].copy(), wrap_heading(float(h[0])), float(h[1])
        )

    def predicted_trajectory(self, now: float | None = None) -> PredictedTrajectory:
        if self._trans is None:
            raise NotInitialized("tracker has not been initialized")
        now = self._trans.now if now is None else now
        if self._trans.dirty:
            self._trans.replan()
        pts = self._trans.planned_positions(now).T
        return PredictedTrajectory(self.uav_id, self.priority, now, self._trans.qp.step, pts)

    # -- avoidance
    def incorporate_neighbor(self, traj: PredictedTrajectory, cfg: AvoidanceConfig | None = None):
        if cfg is not None:
            self.avoidance = cfg
        if traj.uav_id == self.uav_id:
            return
        if traj.priority >= self.priority:
            return  # lower-priority UAVs never alter this one
        self._higher_known.add(traj.uav_id)
        self._last_heard[traj.uav_id] = max(self._last_heard.get(traj.uav_id, -math.inf), traj.start_time)
        prev = self.neighbors.get(traj.uav_id)
        if prev is None or traj.start_time >= prev.start_time:
            self.neighbors[traj.uav_id] = traj
            self._neighbors_dirty = True

    def _fresh_neighbors(self, now: float) -> list[PredictedTrajectory]:
        cfg = self.avoidance
        out = []
        for uid in sorted(self.neighbors):
            t = self.neighbors[uid]
            if now - t.start_time > cfg.stale_timeout or t.end_time < now + MPC_STEP:
                self.status.stale_dropped += 1
                del self.neighbors[uid]
                continue
            out.append(t)
        return out

    def _cleared(self, now: float) -> bool:
        """Silence is not evidence: every neighbour we were avoiding must have
        reported a fresh conflict-free plan, or have been silent long enough to forget."""
        for uid in self.status.conflicts_with:
            if uid in self.neighbors:
                continue
            if now - self._last_heard.get(uid, -math.inf) < self.avoidance.forget_timeout:
                return False
        return True

    def _conflicts(self, now: float) -> list[int]:
        cfg = self.avoidance
        mine = self.predicted_trajectory(now)
        t_own = mine.start_time + mine.dt * np.arange(len(mine.points))
        hits = []
        for t in self._fresh_neighbors(now):
            mask = (t_own >= t.start_time) & (t_own <= t.end_time)
            if not np.any(mask):
                continue
            theirs = t.position_at(t_own[mask])
            d = np.hypot(*(mine.points[mask, :2] - theirs[:, :2]).T)
            if np.any(d < cfg.trigger_radius):
                hits.append(t.uav_id)
        return hits

    def _avoidance_tick(self):
        cfg = self.avoidance
        if cfg is None or not cfg.enabled or not self._higher_known:
            return
        now = self._trans.now
        periodic = now - self._trans.plan_t0 >= self.replan_period - 1e-9
        if not (periodic or self._neighbors_dirty or self._trans.dirty):
            return
        self._neighbors_dirty = False
        hits = self._conflicts(now)
        st = self.status
        if hits:
            st.last_conflict = now
            st.conflicts_with = tuple(sorted(set(st.conflicts_with) | set(hits)))
            if not st.active:
                st.active = True
                st.activations += 1
                # the layer is the priority itself: distinct for every pair of
                # UAVs and independent of what the lossy links have delivered
                st.level = self.priority
                self._apply_targets()
        elif st.active and now - st.last_conflict >= cfg.clear_time - 1e-9 and self._cleared(now):
            st.active = False
            st.conflicts_with = ()
            self._apply_targets()


class TrackerBank:
    """Many independent trackers (no avoidance) advanced in lockstep, vectorised.

    Uses the same QP, governor and replan schedule as :class:`MpcTracker`.
    """

    def __init__(self, positions: np.ndarray, headings: np.ndarray, constraints: TrackerConstraints,
                 now: float = 0.0, replan_period: float = MPC_STEP):
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.m = len(pos)
        self.constraints = constraints
        lim = shaped_limits(constraints, np.zeros((self.m, 3))).reshape(-1, 3)
        x0 = np.column_stack((pos.ravel(), np.zeros(3 * self.m), np.zeros(3 * self.m)))
        self.trans = ChainBank(3, x0, lim, now, replan_period, planar=True)
        hl = np.tile(_heading_limits(constraints), (self.m, 1))
        self.head = ChainBank(2, np.column_stack((headings, np.zeros(self.m))), hl, now, replan_period)
        self._ref_heading = np.asarray(headings, dtype=float).copy()

    def set_references(self, positions: np.ndarray, headings: np.ndarray):
        positions = np.asarray(positions, dtype=float).reshape(self.m, 3)
        delta = positions - self.position
        self.trans.set_target(positions.reshape(-1))
        self.trans.set_limits(shaped_limits(self.constraints, delta).reshape(-1, 3))
        self._ref_heading = np.asarray(headings, dtype=float).copy()
        self._heading_targets()

    def _heading_targets(self):
        eta = self.head.x[:, 0]
        wrapped = (eta + np.pi) % (2 * np.pi) - np.pi
        err = (self._ref_heading - wrapped + np.pi) % (2 * np.pi) - np.pi
        self.head.set_target(eta + err)

    def step(self):
        if self.trans.dirty or self.trans.now - self.trans.plan_t0 >= self.trans.replan_period - 1e-9:
            self._heading_targets()
        self.trans.tick()
        self.head.tick()

    @property
    def position(self) -> np.ndarray:
        return self.trans.x[:, 0].reshape(self.m, 3)

    @property
    def velocity(self) -> np.ndarray:
        return self.trans.x[:, 1].reshape(self.m, 3)

    @property
    def acceleration(self) -> np.ndarray:
        return self.trans.x[:, 2].reshape(self.m, 3)

    @property
    def heading_rate(self) -> np.ndarray:
        return self.head.x[:, 1]
