"""Point-to-point Cartesian trajectories with trapezoidal velocity profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Pose
from .operational import CartesianReference
from .rotations import axis_angle_matrix, matrix_to_quat, rotation_log

DEFAULT_LIMITS = {"v_max": 0.25, "a_max": 0.5, "w_max": 0.5, "alpha_max": 1.0}


@dataclass(frozen=True)
class TrapezoidalProfile:
    d: float
    v_max: float
    a_max: float
    t_acc: float
    t_cruise: float
    t_total: float
    v_peak: float
    accel: float  # acceleration actually used (a_max unless the profile was stretched)

    def evaluate(self, t: float) -> tuple[float, float, float]:
        """``(s, s_dot, s_ddot)`` at time ``t``, clamped outside ``[0, t_total]``."""
        if self.t_total <= 0.0 or t <= 0.0:
            return 0.0, 0.0, 0.0
        if t >= self.t_total:
            return self.d, 0.0, 0.0
        a, ta, v = self.accel, self.t_acc, self.v_peak
        if t < ta:
            return 0.5 * a * t * t, a * t, a
        if t <= ta + self.t_cruise:
            return 0.5 * a * ta * ta + v * (t - ta), v, 0.0
        r = self.t_total - t
        return self.d - 0.5 * a * r * r, a * r, -a


def plan_profile(d: float, v_max: float, a_max: float) -> TrapezoidalProfile:
    """Minimum-time trapezoid (triangle when the cruise speed is never reached)."""
    if v_max <= 0 or a_max <= 0:
        raise ValueError("v_max and a_max must be positive")
    if d < 0:
        raise ValueError("distance must be >= 0")
    if d == 0:
        return TrapezoidalProfile(0.0, v_max, a_max, 0.0, 0.0, 0.0, 0.0, a_max)
    if d < v_max * v_max / a_max:  # triangle: the cruise speed is never reached
        t_acc = math.sqrt(d / a_max)
        t_cruise = 0.0
    else:
        t_acc = v_max / a_max
        t_cruise = d / v_max - t_acc
    v = a_max * t_acc
    return TrapezoidalProfile(d, v_max, a_max, t_acc, t_cruise, 2 * t_acc + t_cruise, v, a_max)


def stretch_profile(p: TrapezoidalProfile, T: float) -> TrapezoidalProfile:
    """Same distance and acceleration, slower cruise, so the profile lasts exactly ``T``."""
    if p.d == 0 or T <= p.t_total:
        return p
    a, d = p.a_max, p.d
    disc = max(a * a * T * T - 4 * a * d, 0.0)
    v = 0.5 * (a * T - math.sqrt(disc))
    t_acc = v / a
    return TrapezoidalProfile(d, p.v_max, a, t_acc, T - 2 * t_acc, T, v, a)


@dataclass(frozen=True)
class Segment:
    start: Pose
    end: Pose
    t0: float
    trans: TrapezoidalProfile
    rot: TrapezoidalProfile
    direction: np.ndarray  # unit translation direction (zero if none)
    axis: np.ndarray  # unit rotation axis in world (zero if none)

    @property
    def duration(self) -> float:
        return max(self.trans.t_total, self.rot.t_total)

    def sample(self, t: float):
        tau = t - self.t0
        s, sd, sdd = self.trans.evaluate(tau)
        th, thd, thdd = self.rot.evaluate(tau)
        p = self.start.p + s * self.direction
        R = axis_angle_matrix(self.axis, th) @ self.start.rotation if self.rot.d > 0 else self.start.rotation
        v = np.r_[sd * self.direction, thd * self.axis]
        a = np.r_[sdd * self.direction, thdd * self.axis]
        return Pose(p, matrix_to_quat(R)), v, a


def _segment(a: Pose, b: Pose, t0, v_max, a_max, w_max, alpha_max) -> Segment:
    dp = b.p - a.p
    d = float(np.linalg.norm(dp))
    axis, angle = rotation_log(b.rotation @ a.rotation.T)
    trans = plan_profile(d, v_max, a_max)
    rot = plan_profile(angle, w_max, alpha_max)
    T = max(trans.t_total, rot.t_total)
    trans, rot = stretch_profile(trans, T), stretch_profile(rot, T)
    direction = dp / d if d > 0 else np.zeros(3)
    return Segment(a, b, t0, trans, rot, direction, np.asarray(axis, dtype=float) if angle > 0 else np.zeros(3))


@dataclass(frozen=True)
class CartesianTrajectory:
    """Segments for both EEs (left, right); an EE without segments holds its pose."""

    segments: tuple[tuple[Segment, ...], tuple[Segment, ...]]
    holds: tuple[Pose, Pose]
    t0: float = 0.0
    waypoint_times: tuple[float, ...] = field(default=())

    @property
    def t_end(self) -> float:
        ends = [s[-1].t0 + s[-1].duration for s in self.segments if s]
        return max(ends, default=self.t0)

    def sample_ee(self, k: int, t: float):
        segs = self.segments[k]
        if not segs:
            return self.holds[k], np.zeros(6), np.zeros(6)
        if t >= segs[-1].t0 + segs[-1].duration:
            return self.holds[k], np.zeros(6), np.zeros(6)  # at rest on the last waypoint
        t = max(t, segs[0].t0)
        for s in segs:
            if t <= s.t0 + s.duration:
                return s.sample(t)
        return segs[-1].sample(t)


def plan_cartesian(waypoints, v_max=0.25, a_max=0.5, w_max=0.5, alpha_max=1.0, ee: int = 1, hold: Pose | None = None, t0: float = 0.0) -> CartesianTrajectory:
    """Rest-to-rest segments through ``waypoints`` for EE ``ee`` (0 left, 1 right).

    Each segment runs translation and rotation on their own trapezoids, the
    faster one stretched to the slower one's duration. The other EE holds
    ``hold`` (or the first waypoint).
    """
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    segs, times = [], [t0]
    t = t0
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        s = _segment(a, b, t, v_max, a_max, w_max, alpha_max)
        segs.append(s)
        t += s.duration
        times.append(t)
    other = hold if hold is not None else waypoints[0]
    segments = [(), ()]
    segments[ee] = tuple(segs)
    holds = [other, other]
    holds[ee] = waypoints[-1]
    return CartesianTrajectory(tuple(segments), tuple(holds), t0, tuple(times))


def sample(traj: CartesianTrajectory, t: float) -> CartesianReference:
    out = [traj.sample_ee(k, t) for k in (0, 1)]
    return CartesianReference(
        (out[0][0], out[1][0]),
        np.r_[out[0][1], out[1][1]],
        np.r_[out[0][2], out[1][2]],
    )


@dataclass(frozen=True)
class HarvestPlanConfig:
    pregrasp_offset: float = 0.15
    approach_axis: tuple = (-1.0, 0.0, 0.0)  # tool frame, points from the peduncle back to the pre-grasp pose
    pre_release: Pose | None = None  # default: 0.2 m above the box
    release: Pose | None = None  # default: the box pose
    home: Pose | None = None  # default: the pre-grasp pose

    def __post_init__(self):
        if self.pregrasp_offset <= 0:
            raise ValueError("pre-grasp offset must be > 0")


HARVEST_LABELS = ("pre-grasp", "grasp", "pre-release", "release", "home")
# events raised on arrival at a waypoint (index into HARVEST_LABELS)
HARVEST_EVENTS = {1: ("gripper_close", "cutter_actuate"), 3: ("gripper_open",)}


def harvest_waypoints(peduncle: Pose, box: Pose, cfg: HarvestPlanConfig = HarvestPlanConfig()) -> list[Pose]:
    """Pre-grasp, grasp, pre-release, release, home."""
    axis = peduncle.rotation @ np.asarray(cfg.approach_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    pre = Pose(peduncle.p + cfg.pregrasp_offset * axis, peduncle.o)
    release = cfg.release or box
    pre_release = cfg.pre_release or Pose(release.p + np.array([0.0, 0.0, 0.2]), release.o)
    home = cfg.home or pre
    return [pre, peduncle, pre_release, release, home]
