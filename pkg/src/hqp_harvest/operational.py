"""Operational and optimization tasks: admittance tracking, hand-guiding, joint posture.

Admittance dynamics, per end-effector, with ``h`` the external wrench acting on it:

    Km (a_d - a) + Kd (v_d - v) + Kp rho~ = -h

``rho~`` stacks the position error ``p_d - p`` and the quaternion error. A
constant push ``f`` therefore settles at ``p - p_d = Kp^-1 f``. Replacing the
acceleration with the backward difference ``a = (v - v_prev) / Ts`` and
``v = J qdot`` gives one linear equality per tick:

    (Km/Ts + Kd) J qdot = Km a_d + (Km/Ts) v_prev + Kd v_d + Kp rho~ + h
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .hierarchy import OPERATIONAL_SLACK_WEIGHT, OPTIMIZATION_SLACK_WEIGHT, TaskConstraint
from .model import EE_FRAMES, Kinematics, Pose, RobotModel
from .rotations import quat_conjugate, quat_multiply

K_JC = np.array([2.0, 0.5] + [10.0] * 14)  # torso revolute, torso prismatic, 14 arm joints


def quaternion_error(o_d, o) -> np.ndarray:
    """Vector part of ``o_d * o^-1``, taken along the shortest rotation."""
    e = quat_multiply(o_d, quat_conjugate(o))
    return -e[1:] if e[0] < 0 else e[1:]


@dataclass(frozen=True)
class AdmittanceParams:
    """Per-EE gains, linear (``_p``) and angular (``_o``), shared by both arms."""

    km_p: float = 20.0
    km_o: float = 3.0
    kd_p: float = 253.0
    kd_o: float = 27.0
    kp_p: float = 800.0
    kp_o: float = 60.0

    def __post_init__(self):
        if min(self.km_p, self.km_o, self.kd_p, self.kd_o) <= 0:
            raise ValueError("virtual mass and damping must be > 0")
        if min(self.kp_p, self.kp_o) < 0:
            raise ValueError("stiffness must be >= 0")

    @staticmethod
    def _diag(lin, ang, n_ee=2):
        return np.tile(np.r_[np.full(3, lin), np.full(3, ang)], n_ee)

    @property
    def km(self) -> np.ndarray:
        return self._diag(self.km_p, self.km_o)

    @property
    def kd(self) -> np.ndarray:
        return self._diag(self.kd_p, self.kd_o)

    @property
    def kp(self) -> np.ndarray:
        return self._diag(self.kp_p, self.kp_o)

    @property
    def Km(self) -> np.ndarray:
        return np.diag(self.km)

    @property
    def Kd(self) -> np.ndarray:
        return np.diag(self.kd)

    @property
    def Kp(self) -> np.ndarray:
        return np.diag(self.kp)

    def compliant(self) -> AdmittanceParams:
        """Same mass and damping, no stiffness: the hand-guiding variant."""
        return replace(self, kp_p=0.0, kp_o=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> AdmittanceParams:
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class CartesianReference:
    """Desired poses of both EEs plus stacked 12-vector twists and accelerations."""

    poses: tuple[Pose, Pose]
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        for pose in self.poses:
            if abs(np.linalg.norm(pose.o) - 1.0) > 1e-6:
                raise ValueError("reference quaternion is not unit norm")
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(12))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(12))

    @classmethod
    def hold(cls, poses) -> CartesianReference:
        return cls(tuple(poses), np.zeros(12), np.zeros(12))


@dataclass
class ControllerMemory:
    """Previous commanded EE twist (12-vector) for the backward-difference acceleration."""

    Ts: float
    v_prev: np.ndarray | None = None

    def __post_init__(self):
        if self.Ts <= 0:
            raise ValueError("sample time must be > 0")

    def initialize(self, J, qdot):
        """First tick: start from the measured twist so there is no acceleration spike."""
        if self.v_prev is None:
            self.v_prev = J @ np.asarray(qdot, dtype=float)

    def update(self, J, qdot):
        self.v_prev = J @ np.asarray(qdot, dtype=float)


def pose_error(kin: Kinematics, poses) -> np.ndarray:
    """Stacked ``[p_d - p, quaternion_error]`` for both EEs (12-vector)."""
    out = np.empty(12)
    for k, (frame, pd) in enumerate(zip(EE_FRAMES, poses)):
        cur = kin.pose(frame)
        out[6 * k : 6 * k + 3] = pd.p - cur.p
        out[6 * k + 3 : 6 * k + 6] = quaternion_error(pd.o, cur.o)
    return out


def _v_prev(mem, J, state):
    if mem.v_prev is None:
        qdot = getattr(state, "qdot", None)
        mem.initialize(J, np.zeros(J.shape[1]) if qdot is None else qdot)
    return mem.v_prev


def admittance_constraint(model: RobotModel, state, mem: ControllerMemory, ref: CartesianReference, h, params: AdmittanceParams, kin=None) -> TaskConstraint:
    """Equality ``J_adm qdot = b_adm`` over both EEs (12 rows)."""
    kin = kin or Kinematics(model, state.q)
    J = kin.stacked_ee_jacobian()
    v_prev = _v_prev(mem, J, state)
    h = np.zeros(12) if h is None else np.asarray(h, dtype=float)
    km_ts = params.km / mem.Ts
    gain = km_ts + params.kd
    b = params.km * ref.a + km_ts * v_prev + params.kd * ref.v + params.kp * pose_error(kin, ref.poses) + h
    return TaskConstraint.equality(gain[:, None] * J, b, OPERATIONAL_SLACK_WEIGHT, "admittance")


def hand_guiding_constraint(model: RobotModel, state, mem: ControllerMemory, h, params: AdmittanceParams, kin=None) -> TaskConstraint:
    """Admittance without stiffness or reference: ``b = (Km/Ts) v_prev + h``."""
    kin = kin or Kinematics(model, state.q)
    J = kin.stacked_ee_jacobian()
    v_prev = _v_prev(mem, J, state)
    h = np.zeros(12) if h is None else np.asarray(h, dtype=float)
    km_ts = params.km / mem.Ts
    b = km_ts * v_prev + h
    return TaskConstraint.equality((km_ts + params.kd)[:, None] * J, b, OPERATIONAL_SLACK_WEIGHT, "hand_guiding")


def preferred_posture_constraint(model: RobotModel, state, q_d, qdot_d, K_jc=K_JC, columns=None, slack_weight=OPTIMIZATION_SLACK_WEIGHT) -> TaskConstraint:
    """Rows ``qdot_i = qdot_d,i + K_jc,i (q_d,i - q_i)`` on the joint columns (torso and arms by default)."""
    cols = model.input_columns("joints") if columns is None else np.asarray(columns)
    q = np.asarray(getattr(state, "q", state), dtype=float)
    off = model.base.state_size - model.n_b
    q_d, qdot_d = np.asarray(q_d, dtype=float), np.asarray(qdot_d, dtype=float)
    K = np.broadcast_to(np.asarray(K_jc, dtype=float), cols.shape)
    if q_d.shape != cols.shape or qdot_d.shape != cols.shape:
        raise ValueError(f"posture targets need {cols.size} entries")
    J = np.zeros((cols.size, model.n_u))
    J[np.arange(cols.size), cols] = 1.0
    b = qdot_d + K * (q_d - q[cols + off])
    return TaskConstraint.equality(J, b, slack_weight, "posture")


def sinusoid_posture_target(model: RobotModel, t: float, amplitude=3.0, rate_amplitude=0.75, period=25.0):
    """Joint-space driver: ``q_d = A sin(2 pi t / T)`` on the arm joints, zero on the torso.

    Returns ``(q_d, qdot_d)`` over the joint columns.
    """
    cols = model.input_columns("joints")
    s = np.isin(cols, np.concatenate([model.input_columns("left"), model.input_columns("right")])).astype(float)
    phase = np.sin(2 * np.pi * t / period)
    return amplitude * phase * s, rate_amplitude * phase * s
