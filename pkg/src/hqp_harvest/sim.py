"""Fixed-step kinematic simulation of the full control loop.

Each tick: scripted wrenches go through the wrist-sensor pipeline, the
supervisor advances, the mode's hierarchy is built and solved, and the
commanded joint velocities are integrated with explicit Euler.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .hierarchy import CascadeError, Hierarchy, TaskConstraint, solve_cascade
from .model import EE_FRAMES, Kinematics, ModelError, Pose, RobotModel, Wrench, default_model_path, load_model
from .operational import (
    K_JC,
    AdmittanceParams,
    CartesianReference,
    ControllerMemory,
    admittance_constraint,
    hand_guiding_constraint,
    preferred_posture_constraint,
    sinusoid_posture_target,
)
from .rotations import cross3, quat_normalize
from .safety import (
    Capsule,
    CbfGains,
    CollisionPair,
    SafetyConfig,
    VirtualWall,
    default_safety_config,
    safety_constraints,
)
from .supervisor import (
    Detection,
    FsmState,
    HierarchyOptions,
    Mode,
    PerceptionOutcome,
    Phase,
    TickEvent,
    hierarchy_for_mode,
    step,
)
from .traj import HarvestPlanConfig, harvest_waypoints, plan_cartesian, sample
from .wrenchproc import ContactConfig, ContactState, PayloadModel, classify_contact, compensate_payload, sensor_to_world

log = logging.getLogger(__name__)

ARMS = ("left", "right")
ARRIVAL_TOL = 5e-4  # m, EE distance to the segment goal before the next phase starts
ARRIVAL_WAIT = 5.0  # s, extra time granted to reach it


class ScenarioError(ValueError):
    """Invalid scenario file or content."""


class ScenarioAbort(RuntimeError):
    """The controller failed mid-run; carries the partial result."""

    def __init__(self, tick: int, t: float, error: CascadeError, result: ScenarioResult):
        self.tick, self.t, self.error, self.result = tick, t, error, result
        super().__init__(f"tick {tick} (t = {t:.2f} s): {error}")


# --- scripted inputs -------------------------------------------------------


@dataclass(frozen=True)
class WrenchSegment:
    t_start: float
    t_end: float
    wrench: np.ndarray  # (f, mu), mu about the EE point
    frame: str = "world"  # world | tool
    toward: str | np.ndarray | None = None  # push target (frame, point or world xyz); |f| keeps, direction follows


@dataclass(frozen=True)
class WrenchProfile:
    segments: tuple[WrenchSegment, ...] = ()

    def __post_init__(self):
        segs = sorted(self.segments, key=lambda s: s.t_start)
        for s in segs:
            if s.t_end <= s.t_start:
                raise ValueError(f"wrench segment [{s.t_start}, {s.t_end}] is empty")
            if s.frame not in ("world", "tool"):
                raise ValueError(f"wrench frame must be world or tool, got {s.frame!r}")
        for a, b in zip(segs, segs[1:]):
            if b.t_start < a.t_end:
                raise ValueError(f"wrench segments overlap at t = {b.t_start}")
        object.__setattr__(self, "segments", tuple(segs))

    def active(self, t: float) -> WrenchSegment | None:
        for s in self.segments:
            if s.t_start <= t < s.t_end:
                return s
        return None


def sample_wrench(profile: WrenchProfile, t: float, rng=None, noise=(0.0, 0.0), R_tool=None, p_ee=None, locate=None) -> Wrench:
    """World-frame wrench at the EE: active segment plus uniform noise.

    Tool-frame segments are rotated by ``R_tool``. A segment with a ``toward``
    target keeps its force magnitude but points from ``p_ee`` at the target;
    ``locate`` maps a frame or point name to its world position.
    """
    seg = profile.active(t)
    w = np.zeros(6) if seg is None else np.asarray(seg.wrench, dtype=float).copy()
    if seg is not None and seg.frame == "tool":
        R = np.eye(3) if R_tool is None else R_tool
        w = np.r_[R @ w[:3], R @ w[3:]]
    if seg is not None and seg.toward is not None:
        target = locate(seg.toward) if isinstance(seg.toward, str) else np.asarray(seg.toward, dtype=float)
        d = target - p_ee
        w[:3] = np.linalg.norm(w[:3]) * d / max(np.linalg.norm(d), 1e-12)
    if rng is not None:
        n = rng.uniform(-1.0, 1.0, 6)
        w = w + np.r_[noise[0] * n[:3], noise[1] * n[3:]]
    return Wrench(w[:3], w[3:], "world")


@dataclass(frozen=True)
class PerceptionScript:
    delay: float
    outcome: PerceptionOutcome


@dataclass(frozen=True)
class HarvestSettings:
    arm: str = "right"
    start: float = 0.5
    box: Pose | None = None
    plan: HarvestPlanConfig = HarvestPlanConfig()
    limits: dict = field(default_factory=lambda: {"v_max": 0.25, "a_max": 0.5, "w_max": 0.5, "alpha_max": 1.0})
    cut_time: float = 3.0
    settle: float = 0.5


@dataclass
class ScenarioConfig:
    name: str
    model: RobotModel
    initial_q: np.ndarray
    duration: float
    Ts: float = 0.01
    seed: int = 0
    noise: tuple[float, float] = (0.0, 0.0)
    safety: SafetyConfig = field(default_factory=default_safety_config)
    admittance: dict = field(default_factory=lambda: {Mode.AUTONOMOUS: AdmittanceParams(), Mode.GUIDED: AdmittanceParams().compliant()})
    contact: ContactConfig = ContactConfig()
    payload: PayloadModel = PayloadModel()
    wrench_profiles: dict = field(default_factory=dict)
    perception: dict = field(default_factory=dict)
    harvest: HarvestSettings | None = None
    hierarchy: HierarchyOptions = HierarchyOptions()
    posture_gains: np.ndarray = field(default_factory=lambda: K_JC.copy())
    posture_target: np.ndarray | None = None  # joint columns; default: initial joints
    hard_boxes: tuple[TaskConstraint, ...] = ()

    def __post_init__(self):
        if self.Ts <= 0 or self.duration <= 0:
            raise ScenarioError("sim: Ts and duration must be positive")
        m = self.model
        q = np.asarray(self.initial_q, dtype=float)
        if q.shape != (m.state_size,):
            raise ScenarioError(f"sim.initial_q: expected {m.state_size} values, got {q.size}")
        bad = [i for i in range(q.size) if not (m.pos_lower[i] < q[i] < m.pos_upper[i])]
        if bad:
            from .safety import _state_name

            names = ", ".join(_state_name(m, i) for i in bad)
            raise ScenarioError(f"sim.initial_q: outside position limits for {names}")
        self.initial_q = q


# --- scenario files --------------------------------------------------------

_SECTIONS = {"name", "model", "sim", "safety", "admittance", "wrench_profiles", "perception_script", "harvest", "hierarchy"}


def scenario_path(name_or_path) -> Path:
    """A file path, or ``scenarios/<name>`` for a shipped scenario."""
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name if p.suffix else p.name + ".yaml"
    shipped = resources.files("hqp_harvest") / "data" / "scenarios" / stem
    if shipped.is_file():
        return Path(str(shipped))
    raise ScenarioError(f"scenario not found: {name_or_path}")


def shipped_scenarios() -> list[str]:
    d = resources.files("hqp_harvest") / "data" / "scenarios"
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".yaml"))


def load_scenario(name_or_path, seed: int | None = None) -> ScenarioConfig:
    path = scenario_path(name_or_path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"{path}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    doc.setdefault("name", path.stem)
    try:
        return scenario_from_dict(doc, path.parent, seed)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def _keys(section: dict, allowed: set, where: str):
    if not isinstance(section, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    extra = set(section) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")


def _arr(x, n, where):
    try:
        a = np.asarray(x, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected numbers") from None
    if n is not None and a.size != n:
        raise ScenarioError(f"{where}: expected {n} values, got {a.size}")
    return a


def _pose(d, where, default_o=None) -> Pose:
    _keys(d, {"p", "quat"}, where)
    o = _arr(d["quat"], 4, f"{where}.quat") if d.get("quat") is not None else default_o
    if o is None:
        o = np.array([1.0, 0, 0, 0])
    return Pose(_arr(d.get("p"), 3, f"{where}.p"), quat_normalize(o))


def _columns(model, spec, where):
    if isinstance(spec, str):
        try:
            return model.input_columns(spec)
        except KeyError:
            raise ScenarioError(f"{where}: unknown joint group {spec!r}") from None
    return np.asarray(spec, dtype=int)


def _safety(doc, model, where="safety") -> SafetyConfig:
    _keys(doc, {"defaults", "position_gain", "velocity_caps", "freeze", "walls", "pairs"}, where)
    base = default_safety_config() if doc.get("defaults", True) else SafetyConfig()
    gains = base.position_gains
    if "position_gain" in doc:
        g = float(doc["position_gain"])
        try:
            gains = CbfGains(g, g)
        except ValueError as exc:
            raise ScenarioError(f"{where}.position_gain: {exc}") from None
    lo, hi = model.vel_lower.copy(), model.vel_upper.copy()
    for group, cap in (doc.get("velocity_caps") or {}).items():
        cols = _columns(model, group, f"{where}.velocity_caps")
        lo[cols] = np.maximum(lo[cols], -float(cap))
        hi[cols] = np.minimum(hi[cols], float(cap))
    for group in doc.get("freeze") or []:
        cols = _columns(model, group, f"{where}.freeze")
        lo[cols] = hi[cols] = 0.0
    walls = base.walls
    if "walls" in doc:
        walls = []
        for k, w in enumerate(doc["walls"] or []):
            wh = f"{where}.walls[{k}]"
            _keys(w, {"name", "p1", "p2", "p3", "threshold", "gain", "frame", "points"}, wh)
            try:
                walls.append(
                    VirtualWall(
                        _arr(w["p1"], 3, wh), _arr(w["p2"], 3, wh), _arr(w["p3"], 3, wh), float(w["threshold"]),
                        tuple(w["points"]), float(w.get("gain", 5.0)), w.get("frame", "world"), w.get("name", f"wall{k}"),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ScenarioError(f"{wh}: {exc}") from None
        walls = tuple(walls)
    pairs = base.pairs
    if "pairs" in doc:
        pairs = []
        for k, pd in enumerate(doc["pairs"] or []):
            ph = f"{where}.pairs[{k}]"
            _keys(pd, {"point", "other", "capsule", "threshold", "gain"}, ph)
            try:
                if "capsule" in pd:
                    c = pd["capsule"]
                    other = Capsule(c["frame"], _arr(c["a"], 3, ph), _arr(c["b"], 3, ph), float(c.get("radius", 0.0)), c.get("name", "capsule"))
                else:
                    other = str(pd["other"])
                pairs.append(CollisionPair(str(pd["point"]), other, float(pd["threshold"]), float(pd.get("gain", 10.0))))
            except (KeyError, ValueError) as exc:
                raise ScenarioError(f"{ph}: {exc}") from None
        pairs = tuple(pairs)
    for w in walls:
        for p in w.points:
            if p not in model.points:
                raise ScenarioError(f"{where}: wall {w.name} monitors unknown point {p!r}")
        if w.frame not in model.frames:
            raise ScenarioError(f"{where}: wall {w.name} uses unknown frame {w.frame!r}")
    for pr in pairs:
        names = [pr.point] + ([pr.obstacle] if isinstance(pr.obstacle, str) else [])
        for p in names:
            if p not in model.points:
                raise ScenarioError(f"{where}: collision pair uses unknown point {p!r}")
    return SafetyConfig(gains, lo, hi, walls, pairs)


def scenario_from_dict(doc: dict, base_dir=Path("."), seed: int | None = None) -> ScenarioConfig:
    _keys(doc, _SECTIONS, "scenario")
    mpath = doc.get("model", "default")
    try:
        model = load_model(default_model_path() if mpath == "default" else Path(base_dir) / mpath)
    except (ModelError, OSError) as exc:
        raise ScenarioError(f"model: {exc}") from None

    simd = doc.get("sim") or {}
    _keys(simd, {"duration_s", "Ts", "seed", "initial_q", "noise", "contact", "payload"}, "sim")
    iq = simd.get("initial_q", "home")
    q0 = model.home_q() if iq == "home" else _arr(iq, model.state_size, "sim.initial_q")
    noise = simd.get("noise") or {}
    _keys(noise, {"force_N", "moment_Nm"}, "sim.noise")
    contact = simd.get("contact") or {}
    _keys(contact, {"theta_hi_N", "theta_lo_N", "debounce_s"}, "sim.contact")
    pay = simd.get("payload") or {}
    _keys(pay, {"mass_kg", "com_m"}, "sim.payload")
    try:
        contact_cfg = ContactConfig.from_dict(contact)
        payload = PayloadModel(float(pay.get("mass_kg", 0.0)), _arr(pay.get("com_m", [0, 0, 0]), 3, "sim.payload.com_m"))
    except ValueError as exc:
        raise ScenarioError(f"sim: {exc}") from None

    safety = _safety(doc.get("safety") or {}, model)

    adm = doc.get("admittance") or {}
    _keys(adm, {"autonomous", "guided"}, "admittance")
    gain_keys = {"km_p", "km_o", "kd_p", "kd_o", "kp_p", "kp_o"}
    try:
        for k in ("autonomous", "guided"):
            _keys(adm.get(k) or {}, gain_keys, f"admittance.{k}")
        params = {
            Mode.AUTONOMOUS: AdmittanceParams.from_dict(adm.get("autonomous") or {}),
            Mode.GUIDED: AdmittanceParams.from_dict(adm.get("guided") or {}).compliant(),
        }
    except ValueError as exc:
        raise ScenarioError(f"admittance: {exc}") from None

    profiles = {}
    wp = doc.get("wrench_profiles") or {}
    _keys(wp, set(ARMS), "wrench_profiles")
    for arm, segs in wp.items():
        out = []
        for k, s in enumerate(segs or []):
            wh = f"wrench_profiles.{arm}[{k}]"
            _keys(s, {"t_start", "t_end", "force", "moment", "frame", "toward", "magnitude"}, wh)
            toward = s.get("toward")
            if toward is not None:
                if "force" in s or "magnitude" not in s:
                    raise ScenarioError(f"{wh}: a push 'toward' a target takes 'magnitude', not 'force'")
                if isinstance(toward, str):
                    if toward not in model.frames and toward not in model.points:
                        raise ScenarioError(f"{wh}: unknown push target {toward!r}")
                else:
                    toward = _arr(toward, 3, f"{wh}.toward")
                force = [float(s["magnitude"]), 0.0, 0.0]
            else:
                force = s.get("force", [0, 0, 0])
            w = np.r_[_arr(force, 3, wh), _arr(s.get("moment", [0, 0, 0]), 3, wh)]
            out.append(WrenchSegment(float(s["t_start"]), float(s["t_end"]), w, s.get("frame", "world"), toward))
        try:
            profiles[arm] = WrenchProfile(tuple(out))
        except ValueError as exc:
            raise ScenarioError(f"wrench_profiles.{arm}: {exc}") from None

    kin0 = Kinematics(model, q0)
    perception = {}
    ps = doc.get("perception_script") or {}
    _keys(ps, {"head", "wrist"}, "perception_script")
    for src, entry in ps.items():
        wh = f"perception_script.{src}"
        _keys(entry, {"delay_s", "detections"}, wh)
        dets = []
        for k, d in enumerate(entry.get("detections") or []):
            dh = f"{wh}.detections[{k}]"
            _keys(d, {"bunch", "peduncle", "confidence"}, dh)
            o_def = kin0.pose("right_ee").o
            bunch = _pose(d["bunch"], f"{dh}.bunch", o_def) if d.get("bunch") else None
            ped = _pose(d["peduncle"], f"{dh}.peduncle", o_def) if d.get("peduncle") else None
            try:
                dets.append(Detection(bunch, ped, float(d.get("confidence", 1.0))))
            except ValueError as exc:
                raise ScenarioError(f"{dh}: {exc}") from None
        perception[src] = PerceptionScript(float(entry.get("delay_s", 0.0)), PerceptionOutcome(src, dets))

    harvest = None
    if doc.get("harvest"):
        h = doc["harvest"]
        _keys(h, {"arm", "start_s", "box", "pregrasp_offset_m", "approach_axis", "pre_release", "limits", "cut_s", "settle_s"}, "harvest")
        arm = h.get("arm", "right")
        if arm not in ARMS:
            raise ScenarioError(f"harvest.arm: expected left or right, got {arm!r}")
        o_def = kin0.pose(f"{arm}_ee").o
        box = _pose(h["box"], "harvest.box", o_def) if h.get("box") else None
        if box is None:
            raise ScenarioError("harvest.box is required")
        try:
            plan = HarvestPlanConfig(
                float(h.get("pregrasp_offset_m", 0.15)),
                tuple(_arr(h.get("approach_axis", [-1, 0, 0]), 3, "harvest.approach_axis")),
                _pose(h["pre_release"], "harvest.pre_release", o_def) if h.get("pre_release") else None,
                box,
                kin0.pose(f"{arm}_ee"),
            )
        except ValueError as exc:
            raise ScenarioError(f"harvest: {exc}") from None
        limits = {"v_max": 0.25, "a_max": 0.5, "w_max": 0.5, "alpha_max": 1.0}
        lim = h.get("limits") or {}
        _keys(lim, set(limits), "harvest.limits")
        limits.update({k: float(v) for k, v in lim.items()})
        harvest = HarvestSettings(arm, float(h.get("start_s", 0.5)), box, plan, limits, float(h.get("cut_s", 3.0)), float(h.get("settle_s", 0.5)))

    hd = doc.get("hierarchy") or {}
    _keys(hd, {"operational", "posture", "posture_driver", "posture_gains", "posture_target", "regularization", "hard_boxes"}, "hierarchy")
    try:
        opts = HierarchyOptions(
            hd.get("operational", "auto"), bool(hd.get("posture", True)), hd.get("posture_driver", "hold"), float(hd.get("regularization", 1e-4))
        )
    except ValueError as exc:
        raise ScenarioError(f"hierarchy: {exc}") from None
    if opts.operational == "auto" and harvest is None:
        opts = HierarchyOptions("admittance", opts.posture, opts.posture_driver, opts.regularization)
    n_j = model.input_columns("joints").size
    gains = _arr(hd["posture_gains"], n_j, "hierarchy.posture_gains") if "posture_gains" in hd else K_JC.copy()
    target = _arr(hd["posture_target"], n_j, "hierarchy.posture_target") if "posture_target" in hd else None
    boxes = []
    for k, b in enumerate(hd.get("hard_boxes") or []):
        bh = f"hierarchy.hard_boxes[{k}]"
        _keys(b, {"columns", "lo", "hi", "label"}, bh)
        cols = _columns(model, b["columns"], bh)
        J = np.zeros((cols.size, model.n_u))
        J[np.arange(cols.size), cols] = 1.0
        try:
            boxes.append(TaskConstraint(J, float(b["lo"]), float(b["hi"]), 1.0, b.get("label", f"hard_box{k}")))
        except ValueError as exc:
            raise ScenarioError(f"{bh}: {exc}") from None

    try:
        return ScenarioConfig(
            name=str(doc.get("name", "scenario")),
            model=model,
            initial_q=q0,
            duration=float(simd.get("duration_s", 10.0)),
            Ts=float(simd.get("Ts", 0.01)),
            seed=int(simd.get("seed", 0) if seed is None else seed),
            noise=(float(noise.get("force_N", 0.0)), float(noise.get("moment_Nm", 0.0))),
            safety=safety,
            admittance=params,
            contact=contact_cfg,
            payload=payload,
            wrench_profiles=profiles,
            perception=perception,
            harvest=harvest,
            hierarchy=opts,
            posture_gains=gains,
            posture_target=target,
            hard_boxes=tuple(boxes),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


# --- the loop --------------------------------------------------------------


def integrate(q, qdot, Ts: float, model: RobotModel) -> np.ndarray:
    """Explicit Euler through the state-rate map: ``q + M(q) qdot Ts``."""
    q = np.asarray(q, dtype=float)
    return q + model.state_rate_matrix(q) @ np.asarray(qdot, dtype=float) * Ts


@dataclass
class LogRecord:
    t: float
    q: np.ndarray
    qdot: np.ndarray
    ee_pose: np.ndarray  # 2 x 7 (p, quat)
    ee_twist: np.ndarray  # 12
    ee_ref: np.ndarray  # 2 x 3 desired positions
    wrench_raw: np.ndarray  # 12, sensor frames
    wrench_ext: np.ndarray  # 12, world axes about the EE, zero outside contact
    h: np.ndarray
    slack_norms: np.ndarray  # 3 (NaN for absent levels)
    solve_time: float
    phase: str
    mode: str
    event: str


@dataclass
class ScenarioResult:
    name: str
    model: RobotModel
    records: list[LogRecord]
    events: list[tuple[float, str, str, str]]
    h_labels: tuple[str, ...]
    safety_rows: int
    seed: int

    @property
    def columns(self) -> list[str]:
        return log_columns(self.model, self.h_labels)

    def array(self, attr: str) -> np.ndarray:
        """Stack one LogRecord field over all ticks."""
        return np.array([getattr(r, attr) for r in self.records])


class Simulation:
    """Owns the robot state, supervisor state and controller memory of one run."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        m = self.model = cfg.model
        self.q = cfg.initial_q.copy()
        self.qdot = np.zeros(m.n_u)
        self.t = 0.0
        self.tick = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.mem = ControllerMemory(cfg.Ts)
        self.fsm = FsmState()
        self.contacts = {a: ContactState() for a in ARMS}
        kin = Kinematics(m, self.q)
        self.home_poses = tuple(kin.pose(f) for f in EE_FRAMES)
        self.hold = self.home_poses
        self.traj = None
        self.perceived = False
        self.started = False
        cols = m.input_columns("joints")
        off = m.base.state_size - m.n_b
        self.posture_target = cfg.posture_target if cfg.posture_target is not None else self.q[cols + off].copy()
        self.events: list[tuple[float, str, str, str]] = []
        self.records: list[LogRecord] = []
        safety0 = safety_constraints(m, kin, cfg.safety)
        self.safety_rows = safety0.m
        self.h_mask = ~np.isnan(safety0.barrier)
        self.h_labels = tuple(lbl for lbl, k in zip(safety0.row_labels, self.h_mask) if k)
        self._event(f"seed={cfg.seed}")

    def _event(self, text):
        self.events.append((self.t, self.fsm.phase.value, self.fsm.mode.value, text))

    @staticmethod
    def _locate(kin, name):
        return kin.point_position(name) if name in kin.model.points else kin.frame_transform(name)[1]

    # sensor pipeline
    def _wrenches(self, kin):
        raw, ext, contact = np.zeros(12), np.zeros(12), False
        for k, arm in enumerate(ARMS):
            R_ee, p_ee = kin.frame_transform(f"{arm}_ee")
            prof = self.cfg.wrench_profiles.get(arm, WrenchProfile())
            w = sample_wrench(prof, self.t, self.rng, self.cfg.noise, R_ee, p_ee, lambda n: self._locate(kin, n))
            R_s, p_s = kin.frame_transform(f"{arm}_sensor")
            o_s = kin.pose(f"{arm}_sensor").o
            g = self.cfg.payload.gravity_wrench(o_s)
            f_s = R_s.T @ w.f + g.f
            mu_s = R_s.T @ (w.mu + cross3(p_ee - p_s, w.f)) + g.mu
            meas = Wrench(f_s, mu_s, "sensor")
            comp = compensate_payload(meas, o_s, self.cfg.payload)
            world = sensor_to_world(comp, R_s, p_s, p_ee)
            prev = self.contacts[arm]
            cur = self.contacts[arm] = classify_contact(world, prev, self.cfg.contact, self.t)
            if cur.in_contact != prev.in_contact:
                self._event(f"{arm} contact {'on' if cur.in_contact else 'off'}")
            raw[6 * k : 6 * k + 6] = meas.as_vector()
            ext[6 * k : 6 * k + 6] = cur.wrench.as_vector()
            contact |= cur.in_contact
        return raw, ext, contact

    # supervisor plumbing
    def _supervise(self, kin, contact):
        hv = self.cfg.harvest
        if hv is None:
            return
        cmd = None
        if not self.started and self.t >= hv.start - 1e-9:
            cmd, self.started = "start", True
        per = None
        src = {Phase.DETECT_HEAD: "head", Phase.DETECT_WRIST: "wrist"}.get(self.fsm.phase)
        if src and not self.perceived:
            script = self.cfg.perception.get(src, PerceptionScript(0.0, PerceptionOutcome(src, ())))
            if self.t - self.fsm.phase_since >= script.delay - 1e-9:
                per, self.perceived = script.outcome, True
                self._event(f"perception {src}: {len(script.outcome.detections)} detection(s)")
        done = False
        if self.fsm.phase is Phase.CUT:
            done = self.t - self.fsm.phase_since >= hv.cut_time - 1e-9
        elif self.traj is not None:
            k = ARMS.index(hv.arm)
            gap = np.linalg.norm(kin.pose(EE_FRAMES[k]).p - self.traj.holds[k].p)
            settled = self.t >= self.traj.t_end + hv.settle - 1e-9
            # wait for the arm to catch up (joint caps may hold it back), but not forever
            done = settled and (gap <= ARRIVAL_TOL or self.t >= self.traj.t_end + hv.settle + ARRIVAL_WAIT - 1e-9)
        before = self.fsm
        self.fsm = step(before, TickEvent(self.t, per, contact, done, cmd))
        for e in self.fsm.events:
            self._event(e)
        if self.fsm.phase is not before.phase:
            self.perceived = False
            self._plan(kin, before)

    def _plan(self, kin, before):
        hv, s = self.cfg.harvest, self.fsm
        k = ARMS.index(hv.arm)
        if before.mode is Mode.GUIDED and s.mode is Mode.AUTONOMOUS:
            # replan from where the operator left the arms
            self.hold = tuple(kin.pose(f) for f in EE_FRAMES)
        cur = self.hold[k] if self.traj is None else self.traj.holds[k]
        other = self.hold[1 - k] if self.traj is None else self.traj.holds[1 - k]
        self.hold = tuple(cur if i == k else other for i in range(2))
        goal = None
        if s.phase is Phase.MOVE_PRE_GRASP:
            goal = [harvest_waypoints(s.target, hv.box, hv.plan)[0]]
        elif s.phase is Phase.GRASP:
            goal = [s.target if s.target is not None else cur]
        elif s.phase is Phase.DEPOSIT:
            wps = harvest_waypoints(cur, hv.box, hv.plan)
            goal = [wps[2], wps[3]]
        elif s.phase is Phase.HOME:
            goal = [self.home_poses[k]]
        if goal is None:
            self.traj = None
            return
        self.traj = plan_cartesian([cur] + goal, ee=k, hold=other, t0=self.t, **hv.limits)

    def _reference(self):
        if self.traj is not None:
            return sample(self.traj, self.t)
        return CartesianReference.hold(self.hold)

    def _hierarchy(self, kin, ext):
        cfg, m = self.cfg, self.model
        spec = hierarchy_for_mode(self.fsm, cfg.hierarchy)
        safety = safety_constraints(m, kin, cfg.safety)
        levels = [(safety,)]
        ref = None
        if spec.operational == "admittance":
            ref = self._reference()
            levels.append((admittance_constraint(m, None, self.mem, ref, ext, cfg.admittance[Mode.AUTONOMOUS], kin),))
        elif spec.operational == "hand_guiding":
            levels.append((hand_guiding_constraint(m, None, self.mem, ext, cfg.admittance[Mode.GUIDED], kin),))
        if spec.posture:
            if cfg.hierarchy.posture_driver == "sinusoid":
                q_d, qdot_d = sinusoid_posture_target(m, self.t)
            else:
                q_d, qdot_d = self.posture_target, np.zeros_like(self.posture_target)
            levels.append((preferred_posture_constraint(m, self.q, q_d, qdot_d, cfg.posture_gains),))
        h = Hierarchy(tuple(levels), m.n_u, cfg.hierarchy.regularization, cfg.hard_boxes)
        return h, safety, ref, spec

    def step(self) -> LogRecord:
        m, cfg = self.model, self.cfg
        kin = Kinematics(m, self.q)
        J = kin.stacked_ee_jacobian()
        if self.mem.v_prev is None:
            self.mem.initialize(J, self.qdot)
        raw, ext, contact = self._wrenches(kin)
        n_ev = len(self.events)
        self._supervise(kin, contact)
        h, safety, ref, spec = self._hierarchy(kin, ext)
        sol = solve_cascade(h)
        qdot = sol.qdot
        slack = np.full(3, np.nan)
        slack[: len(sol.slacks)] = sol.slack_norms
        poses = np.array([np.r_[kin.pose(f).p, kin.pose(f).o] for f in EE_FRAMES])
        ref_p = np.array([p.p for p in (ref.poses if ref is not None else self.hold)])
        rec = LogRecord(
            self.t, self.q.copy(), qdot.copy(), poses, J @ qdot, ref_p, raw, ext,
            safety.barrier[self.h_mask], slack, sol.solve_time, self.fsm.phase.value, self.fsm.mode.value,
            ";".join(e[3] for e in self.events[n_ev:]),
        )
        self.records.append(rec)
        self.mem.update(J, qdot)
        self.qdot = qdot
        self.q = integrate(self.q, qdot, cfg.Ts, m)
        self.tick += 1
        self.t = self.tick * cfg.Ts
        return rec

    def result(self) -> ScenarioResult:
        return ScenarioResult(self.cfg.name, self.model, self.records, self.events, self.h_labels, self.safety_rows, self.cfg.seed)

    def run(self) -> ScenarioResult:
        n = int(round(self.cfg.duration / self.cfg.Ts))
        while self.tick < n:
            try:
                self.step()
            except CascadeError as err:
                self._event(f"abort: {err}")
                raise ScenarioAbort(self.tick, self.t, err, self.result()) from err
        return self.result()


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    return Simulation(cfg).run()


# --- CSV -------------------------------------------------------------------


def _state_names(model):
    from .safety import _input_name, _state_name

    return [_state_name(model, i) for i in range(model.state_size)], [_input_name(model, c) for c in range(model.n_u)]


def log_columns(model: RobotModel, h_labels) -> list[str]:
    """CSV header, in LogRecord field order."""
    cols = ["t"]
    sn, inn = _state_names(model)
    cols += [f"q:{n}" for n in sn] + [f"qdot:{n}" for n in inn]
    for arm in ARMS:
        cols += [f"{arm}_ee.{c}" for c in ("x", "y", "z", "qw", "qx", "qy", "qz")]
    for arm in ARMS:
        cols += [f"{arm}_ee.{c}" for c in ("vx", "vy", "vz", "wx", "wy", "wz")]
    for arm in ARMS:
        cols += [f"{arm}_ref.{c}" for c in ("x", "y", "z")]
    for kind in ("raw", "ext"):
        for arm in ARMS:
            cols += [f"{arm}_{kind}.{c}" for c in ("fx", "fy", "fz", "mx", "my", "mz")]
    cols += [f"h:{lbl}" for lbl in h_labels]
    cols += ["slack1", "slack2", "slack3", "solve_time", "phase", "mode", "event"]
    return cols


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _row(rec: LogRecord) -> list[str]:
    nums = np.concatenate(
        [[rec.t], rec.q, rec.qdot, rec.ee_pose.ravel(), rec.ee_twist, rec.ee_ref.ravel(), rec.wrench_raw, rec.wrench_ext, rec.h, rec.slack_norms, [rec.solve_time]]
    )
    return [_fmt(x) for x in nums] + [rec.phase, rec.mode, rec.event]


def write_csv(result: ScenarioResult, out_dir) -> tuple[Path, Path]:
    """Write ``<name>.csv`` (one row per tick) and ``<name>.events.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    main = out / f"{result.name}.csv"
    with main.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result.columns)
        for rec in result.records:
            w.writerow(_row(rec))
    ev = out / f"{result.name}.events.csv"
    with ev.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "phase", "mode", "event"])
        for t, phase, mode, text in result.events:
            w.writerow([_fmt(t), phase, mode, text])
    return main, ev


def initial_safety_report(cfg: ScenarioConfig):
    """Safety rows at t = 0 and the labels of any barrier that is not strictly positive."""
    kin = Kinematics(cfg.model, cfg.initial_q)
    c = safety_constraints(cfg.model, kin, cfg.safety)
    bad = [lbl for lbl, h in zip(c.row_labels, c.barrier) if not np.isnan(h) and h <= 0]
    return c.m, bad
