"""Control-barrier-function safety constraints.

Every builder turns a barrier ``h(q) >= 0`` into a velocity row
``dh/dq qdot >= -phi * h`` (linear class-K function), so the safe set stays
forward invariant under the discrete control loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .hierarchy import SAFETY_SLACK_WEIGHT, TaskConstraint, stack
from .model import Kinematics, RobotModel
from .qpcore import INF

log = logging.getLogger(__name__)

ENVELOPE = 0.1  # rad or m beyond a joint limit where the position barrier saturates
DEGENERATE_DISTANCE = 1e-6


@dataclass(frozen=True)
class CbfGains:
    lower: float | np.ndarray = 10.0
    upper: float | np.ndarray = 10.0

    def __post_init__(self):
        if np.any(np.asarray(self.lower) <= 0) or np.any(np.asarray(self.upper) <= 0):
            raise ValueError("CBF gains must be strictly positive")


@dataclass(frozen=True)
class VirtualWall:
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    threshold: float
    points: tuple[str, ...]
    gain: float = 5.0
    frame: str = "world"
    name: str = "wall"

    def __post_init__(self):
        for k in ("p1", "p2", "p3"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))
        object.__setattr__(self, "points", tuple(self.points))
        if np.linalg.norm(np.cross(self.p2 - self.p1, self.p3 - self.p1)) <= 1e-9:
            raise ValueError(f"wall {self.name}: the three points are collinear")
        if self.threshold <= 0 or self.gain <= 0:
            raise ValueError(f"wall {self.name}: threshold and gain must be positive")

    @cached_property
    def normal(self) -> np.ndarray:
        n = np.cross(self.p2 - self.p1, self.p3 - self.p1)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class Capsule:
    """Segment ``a``-``b`` in a body frame, inflated by ``radius``."""

    frame: str
    a: np.ndarray
    b: np.ndarray
    radius: float = 0.0
    name: str = "capsule"

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        if self.radius < 0:
            raise ValueError("capsule radius must be >= 0")


@dataclass(frozen=True)
class CollisionPair:
    point: str
    obstacle: str | Capsule  # body point name or capsule
    threshold: float
    gain: float = 10.0

    def __post_init__(self):
        if self.threshold <= 0 or self.gain <= 0:
            raise ValueError("collision threshold and gain must be positive")

    @property
    def label(self) -> str:
        other = self.obstacle if isinstance(self.obstacle, str) else self.obstacle.name
        return f"sc:{self.point}-{other}"


@dataclass(frozen=True)
class SafetyConfig:
    position_gains: CbfGains = field(default_factory=CbfGains)
    velocity_lower: np.ndarray | None = None  # overrides of the model limits, per decision column
    velocity_upper: np.ndarray | None = None
    walls: tuple[VirtualWall, ...] = ()
    pairs: tuple[CollisionPair, ...] = ()


def joint_position_limits(state, model: RobotModel, gains: CbfGains = CbfGains(), kin=None) -> TaskConstraint:
    """``-phi_lo (q - q_lo) <= qdot_i <= phi_hi (q_hi - q)`` for every bounded state entry.

    Base ``x``/``y`` are unbounded and emit no row; ``theta`` maps onto the
    ``omega`` column.
    """
    q = np.asarray(getattr(state, "q", state), dtype=float)
    M = model.state_rate_matrix(q)
    rows = np.flatnonzero(np.isfinite(model.pos_lower) | np.isfinite(model.pos_upper))
    ql, qu = model.pos_lower[rows], model.pos_upper[rows]
    qc = np.clip(q[rows], np.where(np.isfinite(ql), ql - ENVELOPE, -np.inf), np.where(np.isfinite(qu), qu + ENVELOPE, np.inf))
    gl = np.broadcast_to(np.asarray(gains.lower, dtype=float), (model.state_size,))[rows]
    gu = np.broadcast_to(np.asarray(gains.upper, dtype=float), (model.state_size,))[rows]
    h_lo, h_hi = qc - ql, qu - qc
    lo = np.where(np.isfinite(ql), -gl * h_lo, -INF)
    hi = np.where(np.isfinite(qu), gu * h_hi, INF)
    key = ("jp_labels", tuple(rows))
    if key not in model._chains:
        model._chains[key] = tuple(f"jp:{_state_name(model, i)}" for i in rows)
    return TaskConstraint(
        M[rows], lo, hi, SAFETY_SLACK_WEIGHT, "joint_position", model._chains[key],
        barrier=np.minimum(q[rows] - ql, qu - q[rows]),
    )


def _state_name(model, i):
    for j in model.joints:
        if j.state_index <= i < j.state_index + j.state_size:
            return j.name if j.state_size == 1 else f"{j.name}.{'xyt'[i - j.state_index]}"
    return str(i)


def _input_name(model, c):
    for j in model.joints:
        if j.input_index <= c < j.input_index + j.input_size:
            return j.name if j.input_size == 1 else f"{j.name}.{'vw'[c - j.input_index]}"
    return str(c)


def joint_velocity_limits(model: RobotModel, lower=None, upper=None) -> TaskConstraint:
    """Box on the decision vector; ``lower``/``upper`` override the model limits (NaN keeps them)."""
    lo, hi = model.vel_lower.copy(), model.vel_upper.copy()
    if lower is not None:
        lower = np.asarray(lower, dtype=float)
        lo = np.where(np.isnan(lower), lo, lower)
    if upper is not None:
        upper = np.asarray(upper, dtype=float)
        hi = np.where(np.isnan(upper), hi, upper)
    if "jv_labels" not in model._chains:
        model._chains["jv_labels"] = tuple(f"jv:{_input_name(model, c)}" for c in range(model.n_u))
    labels = model._chains["jv_labels"]
    return TaskConstraint(np.eye(model.n_u), lo, hi, SAFETY_SLACK_WEIGHT, "joint_velocity", labels)


def wall_geometry(kin: Kinematics, wall: VirtualWall):
    if wall.frame == "world":
        return wall.normal, wall.p1
    R, o = kin.frame_transform(wall.frame)
    return R @ wall.normal, o + R @ wall.p1


def _points(kin: Kinematics, names):
    P = np.array([kin.point_position(n) for n in names]).reshape(len(names), 3)
    J = np.array([kin.point_jacobian(n) for n in names]).reshape(len(names), 3, kin.model.n_u)
    return P, J


def virtual_wall(model: RobotModel, state, wall: VirtualWall, kin=None) -> TaskConstraint:
    """One row per monitored point: ``n' (J_p - J_wall) qdot >= -phi (sigma - sigma_min)``."""
    kin = kin or Kinematics(model, getattr(state, "q", state))
    n, p1 = wall_geometry(kin, wall)
    P, Jp = _points(kin, wall.points)
    h = (P - p1) @ n - wall.threshold
    rows = np.einsum("i,kin->kn", n, Jp - kin.body_point_jacobians(wall.frame, P))
    labels = tuple(f"vw:{wall.name}:{p}" for p in wall.points)
    return TaskConstraint(rows, -wall.gain * h, INF, SAFETY_SLACK_WEIGHT, f"wall:{wall.name}", labels, barrier=h)


def segment_point_distance(p, seg, radius: float = 0.0):
    """Closest point on segment ``seg = (a, b)`` to ``p`` and the distance minus ``radius`` (floored at 0)."""
    a, b = (np.asarray(x, dtype=float) for x in seg)
    p = np.asarray(p, dtype=float)
    d = b - a
    L2 = d @ d
    if L2 <= 0.0:
        raise ValueError("zero-length segment")
    s = min(max((p - a) @ d / L2, 0.0), 1.0)
    c = a + s * d
    e = p - c
    return c, max(math.sqrt(e @ e) - radius, 0.0)


def self_collision(model: RobotModel, state, pairs, kin=None) -> TaskConstraint:
    """One row per pair: ``n_jl' (J_j - J_l) qdot >= -phi (sigma - sigma_min)``.

    Pairs whose points coincide (distance < 1e-6) have no defined gradient; their
    row is left inert and a warning is logged.
    """
    kin = kin or Kinematics(model, getattr(state, "q", state))
    k = len(pairs)
    P, Jp = _points(kin, [pr.point for pr in pairs])
    C, Jc, radius = np.empty((k, 3)), np.empty_like(Jp), np.zeros(k)
    capsules = {}
    for i, pr in enumerate(pairs):
        if isinstance(pr.obstacle, str):
            C[i] = kin.point_position(pr.obstacle)
            Jc[i] = kin.point_jacobian(pr.obstacle)
        else:
            capsules.setdefault(id(pr.obstacle), (pr.obstacle, []))[1].append(i)
    for cap, idx in capsules.values():
        R, o = kin.frame_transform(cap.frame)
        a, b = o + R @ cap.a, o + R @ cap.b
        d = b - a
        if d @ d <= 0.0:
            raise ValueError("zero-length segment")
        s = np.clip((P[idx] - a) @ d / (d @ d), 0.0, 1.0)
        C[idx] = a + s[:, None] * d
        Jc[idx] = kin.body_point_jacobians(cap.frame, C[idx])
        radius[idx] = cap.radius
    diff = P - C
    dist = np.sqrt(np.einsum("ki,ki->k", diff, diff))
    thr = np.array([pr.threshold for pr in pairs])
    gain = np.array([pr.gain for pr in pairs])
    h = np.maximum(dist - radius, 0.0) - thr
    bad = dist < DEGENERATE_DISTANCE
    nhat = diff / np.where(bad, 1.0, dist)[:, None]
    J = np.einsum("ki,kin->kn", nhat, Jp - Jc)
    J[bad] = 0.0
    lo = np.where(bad, -INF, -gain * h)
    for i in np.flatnonzero(bad):
        log.warning("degenerate collision pair %s (distance %.2e): row skipped", pairs[i].label, dist[i])
    labels = tuple(pr.label for pr in pairs)
    return TaskConstraint(J, lo, INF, SAFETY_SLACK_WEIGHT, "self_collision", labels, barrier=h)


def safety_constraints(model: RobotModel, kin: Kinematics, cfg: SafetyConfig) -> TaskConstraint:
    """The full level-1 safety block: position and velocity limits, walls, self-collision."""
    parts = [
        joint_position_limits(kin.q, model, cfg.position_gains),
        joint_velocity_limits(model, cfg.velocity_lower, cfg.velocity_upper),
    ]
    parts += [virtual_wall(model, None, w, kin) for w in cfg.walls]
    if cfg.pairs:
        parts.append(self_collision(model, None, cfg.pairs, kin))
    return stack(parts, "safety")


ARM_POINTS = ("upper_arm", "elbow", "forearm", "wrist", "tool")
TABLE2 = {
    "phi_jp": 10.0,
    "phi_vw": 5.0,
    "sigma_vw": 0.3,
    "phi_sc": 10.0,
    "sigma_head": 0.5,
    "sigma_torso": 0.35,
    "sigma_arm": 0.2,
}


def default_safety_config() -> SafetyConfig:
    """Safety stack of the shipped model: 86 rows in total.

    17 position rows, 18 velocity rows, 10 wall rows (5 points per arm over the
    base), 25 arm-arm pairs, and 4 distal points per arm against the torso and
    head capsules (16).
    """
    wall = VirtualWall(
        [0, 0, 0.45], [1, 0, 0.45], [0, 1, 0.45],
        threshold=TABLE2["sigma_vw"], gain=TABLE2["phi_vw"], frame="base_link", name="base",
        points=[f"{s}_{p}" for s in ("left", "right") for p in ARM_POINTS],
    )
    torso = Capsule("torso", [0, 0, -0.5], [0, 0, 0.4], 0.0, "torso")
    head = Capsule("head", [0, 0, -0.05], [0, 0, 0.1], 0.0, "head")
    pairs = [
        CollisionPair(f"left_{a}", f"right_{b}", TABLE2["sigma_arm"], TABLE2["phi_sc"])
        for a in ARM_POINTS
        for b in ARM_POINTS
    ]
    for side in ("left", "right"):
        for p in ARM_POINTS[1:]:
            pairs.append(CollisionPair(f"{side}_{p}", torso, TABLE2["sigma_torso"], TABLE2["phi_sc"]))
    for side in ("left", "right"):
        for p in ARM_POINTS[1:]:
            pairs.append(CollisionPair(f"{side}_{p}", head, TABLE2["sigma_head"], TABLE2["phi_sc"]))
    return SafetyConfig(CbfGains(TABLE2["phi_jp"], TABLE2["phi_jp"]), walls=(wall,), pairs=tuple(pairs))
