"""Kinematic model of a mobile dual-arm robot.

The configuration vector stacks a planar base pose ``(x, y, theta)``, the torso
joints and the two arms. The base is driven by unicycle inputs ``(v, omega)``,
so the velocity decision vector is one element shorter than the state.

Typical use::

    model = load_model(default_model_path())
    kin = Kinematics(model, model.home_q())
    pose = kin.pose("left_ee")
    J = kin.jacobian("left_ee")
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .rotations import axis_angle_matrix, matrix_to_quat, quat_normalize, quat_to_matrix

JOINT_KINDS = ("planar-base", "prismatic", "revolute")
EE_FRAMES = ("left_ee", "right_ee")
REQUIRED_FRAMES = ("left_ee", "right_ee", "head", "torso", "left_sensor", "right_sensor")


class ModelError(ValueError):
    """Raised when a robot model file cannot be parsed or fails validation."""


class ModelParseError(ModelError):
    pass


class ModelValidationError(ModelError):
    pass


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str
    axis: np.ndarray
    origin_xyz: np.ndarray
    origin_quat: np.ndarray
    parent: int  # index into RobotModel.joints, -1 for world
    state_index: int
    input_index: int

    @property
    def state_size(self) -> int:
        return 3 if self.kind == "planar-base" else 1

    @property
    def input_size(self) -> int:
        return 2 if self.kind == "planar-base" else 1


@dataclass(frozen=True)
class Frame:
    name: str
    joint: int  # attached to the child link of this joint, -1 for world
    xyz: np.ndarray
    quat: np.ndarray


@dataclass(frozen=True)
class BodyPoint:
    name: str
    frame: str
    offset: np.ndarray


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    o: np.ndarray  # unit quaternion (w, x, y, z), w >= 0

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.o)


@dataclass(frozen=True)
class Twist:
    lin: np.ndarray
    ang: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.lin, self.ang])


@dataclass(frozen=True)
class Wrench:
    f: np.ndarray
    mu: np.ndarray
    frame: str = "world"

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.f, self.mu])

    @classmethod
    def zero(cls, frame="world"):
        return cls(np.zeros(3), np.zeros(3), frame)


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qdot: np.ndarray | None = None
    t: float = 0.0


@dataclass(frozen=True)
class RobotModel:
    joints: tuple[Joint, ...]
    frames: dict[str, Frame]
    points: dict[str, BodyPoint]
    pos_lower: np.ndarray
    pos_upper: np.ndarray
    vel_lower: np.ndarray
    vel_upper: np.ndarray
    n_b: int
    n_t: int
    n_a: int
    home: np.ndarray | None = None
    _chains: dict = field(default_factory=dict, compare=False, repr=False)

    @cached_property
    def state_size(self) -> int:
        return sum(j.state_size for j in self.joints)

    @cached_property
    def n_u(self) -> int:
        return sum(j.input_size for j in self.joints)

    @property
    def n_dof(self) -> int:
        """Degrees of freedom n = n_b + n_t + 2 n_a (base counted by its inputs)."""
        return self.n_b + self.n_t + 2 * self.n_a

    @property
    def base(self) -> Joint:
        return self.joints[0]

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(f"unknown joint {name!r}")

    def input_columns(self, group: str) -> np.ndarray:
        """Decision-vector columns of ``base``, ``torso``, ``left`` or ``right``."""
        nb, nt, na = self.n_b, self.n_t, self.n_a
        spans = {
            "base": (0, nb),
            "torso": (nb, nb + nt),
            "left": (nb + nt, nb + nt + na),
            "right": (nb + nt + na, nb + nt + 2 * na),
            "joints": (nb, nb + nt + 2 * na),
        }
        a, b = spans[group]
        return np.arange(a, b)

    def state_columns(self, group: str) -> np.ndarray:
        """State-vector indices of a joint group (base has 3 state entries)."""
        off = self.base.state_size - self.n_b
        if group == "base":
            return np.arange(0, self.base.state_size)
        return self.input_columns(group) + off

    def chain(self, joint: int) -> tuple[int, ...]:
        """Joint indices from the root to ``joint`` inclusive."""
        if joint not in self._chains:
            path = []
            j = joint
            while j >= 0:
                path.append(j)
                j = self.joints[j].parent
            self._chains[joint] = tuple(reversed(path))
        return self._chains[joint]

    def home_q(self) -> np.ndarray:
        if self.home is not None:
            return self.home.copy()
        return np.zeros(self.state_size)

    def state_rate_matrix(self, q) -> np.ndarray:
        """M(q) with q_state_dot = M(q) @ qdot (identity except the base block)."""
        n, m = self.state_size, self.n_u
        M = np.zeros((n, m))
        b = self.base
        M[b.state_index : b.state_index + 3, b.input_index : b.input_index + 2] = base_velocity_mapping(
            q[b.state_index + 2]
        )
        for j in self.joints[1:]:
            M[j.state_index, j.input_index] = 1.0
        return M


def base_velocity_mapping(theta: float) -> np.ndarray:
    """Map unicycle inputs (v, omega) to planar pose rates (xdot, ydot, thetadot)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0], [s, 0.0], [0.0, 1.0]])


def default_model_path() -> Path:
    return Path(str(resources.files("hqp_harvest") / "data" / "canopies.model.yaml"))


def _vec(x, n, what):
    a = np.asarray(x, dtype=float)
    if a.shape != (n,):
        raise ModelValidationError(f"{what}: expected {n} values, got shape {a.shape}")
    return a


def model_from_dict(doc: dict) -> RobotModel:
    if not isinstance(doc, dict):
        raise ModelParseError("model document must be a mapping")
    for key in ("joints", "frames", "limits"):
        if key not in doc:
            raise ModelParseError(f"missing section {key!r}")

    joints: list[Joint] = []
    names: dict[str, int] = {}
    s_idx = u_idx = 0
    for k, jd in enumerate(doc["joints"]):
        try:
            name = str(jd["name"])
            kind = str(jd["kind"])
            axis = _vec(jd.get("axis", [0, 0, 1]), 3, f"joint {name} axis")
            xyz = _vec(jd.get("origin_xyz", [0, 0, 0]), 3, f"joint {name} origin_xyz")
            quat = _vec(jd.get("origin_quat_wxyz", [1, 0, 0, 0]), 4, f"joint {name} origin_quat_wxyz")
            parent_name = jd.get("parent", "world")
        except (KeyError, TypeError) as exc:
            raise ModelParseError(f"joints[{k}]: malformed entry ({exc})") from exc
        if kind not in JOINT_KINDS:
            raise ModelValidationError(f"joint {name}: unknown kind {kind!r}")
        if abs(np.linalg.norm(axis) - 1.0) >= 1e-9:
            raise ModelValidationError(f"joint {name}: axis is not unit length")
        if abs(np.linalg.norm(quat) - 1.0) >= 1e-9:
            raise ModelValidationError(f"joint {name}: origin quaternion is not unit length")
        if parent_name == "world":
            parent = -1
        elif parent_name in names:
            parent = names[parent_name]
        else:
            raise ModelValidationError(f"joint {name}: parent {parent_name!r} must be declared earlier")
        if name in names:
            raise ModelValidationError(f"duplicate joint name {name!r}")
        j = Joint(name, kind, axis, xyz, quat, parent, s_idx, u_idx)
        names[name] = k
        joints.append(j)
        s_idx += j.state_size
        u_idx += j.input_size

    frames: dict[str, Frame] = {}
    for fd in doc["frames"]:
        try:
            fname = str(fd["name"])
            parent_name = fd.get("parent", "world")
            xyz = _vec(fd.get("xyz", [0, 0, 0]), 3, f"frame {fname} xyz")
            quat = _vec(fd.get("quat_wxyz", [1, 0, 0, 0]), 4, f"frame {fname} quat_wxyz")
        except (KeyError, TypeError) as exc:
            raise ModelParseError(f"frames: malformed entry ({exc})") from exc
        if parent_name != "world" and parent_name not in names:
            raise ModelValidationError(f"frame {fname}: unknown parent joint {parent_name!r}")
        frames[fname] = Frame(fname, -1 if parent_name == "world" else names[parent_name], xyz, quat_normalize(quat))
    frames.setdefault("world", Frame("world", -1, np.zeros(3), np.array([1.0, 0, 0, 0])))

    points: dict[str, BodyPoint] = {}
    for pd in doc.get("points", []) or []:
        try:
            pname, pframe = str(pd["name"]), str(pd["frame"])
            off = _vec(pd.get("offset", [0, 0, 0]), 3, f"point {pname} offset")
        except (KeyError, TypeError) as exc:
            raise ModelParseError(f"points: malformed entry ({exc})") from exc
        if pframe not in frames:
            raise ModelValidationError(f"point {pname}: unknown frame {pframe!r}")
        points[pname] = BodyPoint(pname, pframe, off)

    n, m = s_idx, u_idx
    lim = doc["limits"]
    try:
        pl = _vec(lim["pos_lower"], n, "limits.pos_lower")
        pu = _vec(lim["pos_upper"], n, "limits.pos_upper")
        vl = _vec(lim["vel_lower"], m, "limits.vel_lower")
        vu = _vec(lim["vel_upper"], m, "limits.vel_upper")
    except KeyError as exc:
        raise ModelParseError(f"limits: missing {exc}") from exc
    bad = np.flatnonzero(pl > pu)
    if bad.size:
        raise ModelValidationError(f"position limits inverted at state index {int(bad[0])}")
    bad = np.flatnonzero(~((vl < 0) & (vu > 0)))
    if bad.size:
        raise ModelValidationError(f"velocity limits must satisfy lower < 0 < upper (index {int(bad[0])})")

    part = doc.get("partition", {})
    n_b, n_t, n_a = int(part.get("n_b", 2)), int(part.get("n_t", 0)), int(part.get("n_a", 0))
    kinds = [j.kind for j in joints]
    if kinds.count("planar-base") != 1 or kinds[0] != "planar-base":
        raise ModelValidationError("model needs exactly one planar-base joint, listed first")
    if n_b != 2 or n_b + n_t + 2 * n_a != m:
        raise ModelValidationError(f"partition n_b + n_t + 2 n_a = {n_b + n_t + 2 * n_a} does not match {m} inputs")

    home = doc.get("home_q")
    home = None if home is None else _vec(home, n, "home_q")
    return RobotModel(tuple(joints), frames, points, pl, pu, vl, vu, n_b, n_t, n_a, home)


def load_model(path) -> RobotModel:
    """Parse and validate a robot model file (YAML)."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ModelParseError(f"{path}: {exc}") from exc
    return model_from_dict(doc)


def single_joint_model(kind="revolute", axis=(0, 0, 1), child_offset=(1, 0, 0), lower=-np.pi, upper=np.pi) -> RobotModel:
    """One joint on a fixed base, with frame ``tip`` at ``child_offset``. Handy for tests."""
    doc = {
        "joints": [
            {"name": "base", "kind": "planar-base"},
            {"name": "j1", "kind": kind, "axis": list(axis), "parent": "base"},
        ],
        "frames": [{"name": "tip", "parent": "j1", "xyz": list(child_offset)}],
        "limits": {
            "pos_lower": [-np.inf, -np.inf, -np.pi, lower],
            "pos_upper": [np.inf, np.inf, np.pi, upper],
            "vel_lower": [-np.inf, -np.inf, -1.0],
            "vel_upper": [np.inf, np.inf, 1.0],
        },
        "partition": {"n_b": 2, "n_t": 1, "n_a": 0},
    }
    return model_from_dict(doc)


class Kinematics:
    """Forward kinematics of every link for one configuration, plus Jacobians.

    Building this object costs one pass over the joints; pose and Jacobian
    queries then reuse the cached link transforms.
    """

    def __init__(self, model: RobotModel, q):
        self.model = model
        self.q = np.asarray(q, dtype=float)
        if self.q.shape != (model.state_size,):
            raise ValueError(f"state has shape {self.q.shape}, model expects ({model.state_size},)")
        nj = len(model.joints)
        self.R = np.empty((nj, 3, 3))  # child-link rotation
        self.p = np.empty((nj, 3))  # child-link origin
        self.axis = np.empty((nj, 3))  # joint axis in world
        self.origin = np.empty((nj, 3))  # joint origin in world (after motion for the base)
        self._memo: dict = {}  # named frames and points are queried many times per tick
        if "origin_R" not in model._chains:
            model._chains["origin_R"] = [quat_to_matrix(j.origin_quat) for j in model.joints]
            model._chains["frame_R"] = {n: quat_to_matrix(f.quat) for n, f in model.frames.items()}
        origin_R = model._chains["origin_R"]
        for k, j in enumerate(model.joints):
            if j.parent < 0:
                Rp, pp = np.eye(3), np.zeros(3)
            else:
                Rp, pp = self.R[j.parent], self.p[j.parent]
            R0 = Rp @ origin_R[k]
            p0 = pp + Rp @ j.origin_xyz
            a = R0 @ j.axis
            qi = self.q[j.state_index]
            if j.kind == "revolute":
                self.R[k] = R0 @ axis_angle_matrix(j.axis, qi)
                self.p[k] = p0
            elif j.kind == "prismatic":
                self.R[k] = R0
                self.p[k] = p0 + a * qi
            else:
                x, y, th = self.q[j.state_index : j.state_index + 3]
                self.R[k] = R0 @ axis_angle_matrix(np.array([0.0, 0.0, 1.0]), th)
                self.p[k] = p0 + R0 @ np.array([x, y, 0.0])
                a = R0[:, 2]
                self._base_dirs = (R0[:, 0], R0[:, 1], th)
            self.axis[k] = a
            self.origin[k] = self.p[k] if j.kind != "prismatic" else p0

    def _frame(self, name: str) -> Frame:
        try:
            return self.model.frames[name]
        except KeyError:
            raise KeyError(f"unknown frame {name!r}") from None

    def frame_transform(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        key = ("T", name)
        if key in self._memo:
            return self._memo[key]
        fr = self._frame(name)
        if fr.joint < 0:
            Rl, pl = np.eye(3), np.zeros(3)
        else:
            Rl, pl = self.R[fr.joint], self.p[fr.joint]
        out = self._memo[key] = (Rl @ self.model._chains["frame_R"][name], pl + Rl @ fr.xyz)
        return out

    def pose(self, frame: str) -> Pose:
        R, p = self.frame_transform(frame)
        return Pose(p, matrix_to_quat(R))

    def point_position(self, point) -> np.ndarray:
        named = isinstance(point, str)
        if named and ("P", point) in self._memo:
            return self._memo[("P", point)]
        frame, offset = self._resolve_point(point)
        R, p = self.frame_transform(frame)
        out = p + R @ offset
        if named:
            self._memo[("P", point)] = out
        return out

    def _resolve_point(self, point):
        if isinstance(point, str):
            bp = self.model.points[point]
            return bp.frame, bp.offset
        frame, offset = point
        return frame, np.asarray(offset, dtype=float)

    def _chain_layout(self, joint: int):
        """Joint indices and decision columns along the chain, grouped by motion type."""
        m = self.model
        key = ("layout", joint)
        if key not in m._chains:
            rot, rot_cols, lin, lin_cols, base_col = [], [], [], [], -1
            for k in m.chain(joint):
                j = m.joints[k]
                if j.kind == "revolute":
                    rot.append(k)
                    rot_cols.append(j.input_index)
                elif j.kind == "prismatic":
                    lin.append(k)
                    lin_cols.append(j.input_index)
                else:
                    rot.append(k)  # yaw acts like a revolute joint on the omega column
                    rot_cols.append(j.input_index + 1)
                    base_col = j.input_index
            m._chains[key] = (np.array(rot, dtype=int), np.array(rot_cols, dtype=int), np.array(lin, dtype=int), np.array(lin_cols, dtype=int), base_col)
        return m._chains[key]

    def _columns(self, joint: int, p: np.ndarray, angular: bool) -> np.ndarray:
        m = self.model
        J = np.zeros((6 if angular else 3, m.n_u))
        if joint < 0:
            return J
        rot, rot_cols, lin, lin_cols, base_col = self._chain_layout(joint)
        if rot.size:
            a = self.axis[rot]
            d = p - self.origin[rot]
            J[0, rot_cols] = a[:, 1] * d[:, 2] - a[:, 2] * d[:, 1]
            J[1, rot_cols] = a[:, 2] * d[:, 0] - a[:, 0] * d[:, 2]
            J[2, rot_cols] = a[:, 0] * d[:, 1] - a[:, 1] * d[:, 0]
            if angular:
                J[3:, rot_cols] = a.T
        if lin.size:
            J[:3, lin_cols] = self.axis[lin].T
        if base_col >= 0:
            ex, ey, th = self._base_dirs
            J[:3, base_col] = np.cos(th) * ex + np.sin(th) * ey
        return J

    def _link_jacobian(self, joint: int) -> np.ndarray:
        key = ("link", joint)
        if key not in self._memo:
            self._memo[key] = self._columns(joint, self.p[joint], angular=True) if joint >= 0 else None
        return self._memo[key]

    def _shifted(self, joint: int, p: np.ndarray) -> np.ndarray:
        """Linear Jacobian of the point ``p`` rigidly attached to the child link of ``joint``."""
        if joint < 0:
            return np.zeros((3, self.model.n_u))
        J6 = self._link_jacobian(joint)
        w = J6[3:]
        d = p - self.p[joint]
        J = J6[:3].copy()
        J[0] += w[1] * d[2] - w[2] * d[1]
        J[1] += w[2] * d[0] - w[0] * d[2]
        J[2] += w[0] * d[1] - w[1] * d[0]
        return J

    def body_point_jacobians(self, frame: str, P: np.ndarray) -> np.ndarray:
        """``(k, 3, n_u)`` Jacobians of the material points of ``frame`` at world positions ``P``."""
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        out = np.zeros((len(P), 3, self.model.n_u))
        joint = self._frame(frame).joint if frame != "world" else -1
        if joint < 0:
            return out
        J6 = self._link_jacobian(joint)
        w = J6[3:]
        D = P - self.p[joint]
        out[:] = J6[:3]
        out[:, 0] += w[1] * D[:, 2:3] - w[2] * D[:, 1:2]
        out[:, 1] += w[2] * D[:, 0:1] - w[0] * D[:, 2:3]
        out[:, 2] += w[0] * D[:, 1:2] - w[1] * D[:, 0:1]
        return out

    def jacobian(self, frame: str) -> np.ndarray:
        """6 x n_u geometric Jacobian (linear velocity of the frame origin, angular velocity), world frame."""
        fr = self._frame(frame)
        _, p = self.frame_transform(frame)
        if fr.joint < 0:
            return np.zeros((6, self.model.n_u))
        return np.vstack([self._shifted(fr.joint, p), self._link_jacobian(fr.joint)[3:]])

    def point_jacobian(self, point) -> np.ndarray:
        """3 x n_u linear-velocity Jacobian of a body point (name or ``(frame, offset)``)."""
        named = isinstance(point, str)
        if named and ("J", point) in self._memo:
            return self._memo[("J", point)]
        frame, offset = self._resolve_point(point)
        fr = self._frame(frame)
        p = self.point_position((frame, offset))
        J = self._shifted(fr.joint, p)
        if named:
            self._memo[("J", point)] = J
        return J

    def stacked_ee_jacobian(self) -> np.ndarray:
        return np.vstack([self.jacobian("left_ee"), self.jacobian("right_ee")])


def forward_kinematics(model: RobotModel, state: JointState, frame: str) -> Pose:
    return Kinematics(model, state.q).pose(frame)


def geometric_jacobian(model: RobotModel, state: JointState, frame: str) -> np.ndarray:
    return Kinematics(model, state.q).jacobian(frame)


def point_jacobian(model: RobotModel, state: JointState, point) -> np.ndarray:
    return Kinematics(model, state.q).point_jacobian(point)


def stacked_dual_arm_jacobian(model: RobotModel, state: JointState) -> np.ndarray:
    """12 x n_u Jacobian, rows 0-5 left end-effector, rows 6-11 right."""
    return Kinematics(model, state.q).stacked_ee_jacobian()
