"""Harvest supervisor: phase machine with autonomous/guided mode switching.

The machine is a pure transition function. The control loop feeds it one
``TickEvent`` per tick (perception results, debounced contact state,
trajectory completion) and reads back the phase, the mode and any emitted
event strings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

from .model import Pose

log = logging.getLogger(__name__)

CONFIDENCE_THRESHOLD = 0.9
MODE_DWELL = 3.0  # s, minimum spacing between mode changes


class Mode(str, Enum):
    AUTONOMOUS = "Autonomous"
    GUIDED = "Guided"


class Phase(str, Enum):
    IDLE = "Idle"
    DETECT_HEAD = "DetectHead"
    MOVE_PRE_GRASP = "MovePreGrasp"
    DETECT_WRIST = "DetectWrist"
    AWAIT_HUMAN = "AwaitHuman"
    GRASP = "Grasp"
    CUT = "Cut"
    DEPOSIT = "Deposit"
    HOME = "Home"


@dataclass(frozen=True)
class Detection:
    bunch: Pose | None = None
    peduncle: Pose | None = None
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class PerceptionOutcome:
    source: str  # "head" or "wrist"
    detections: tuple[Detection, ...] = ()

    def __post_init__(self):
        if self.source not in ("head", "wrist"):
            raise ValueError(f"unknown perception source {self.source!r}")
        object.__setattr__(self, "detections", tuple(self.detections))

    def best(self, attr: str, threshold: float = CONFIDENCE_THRESHOLD) -> Pose | None:
        ok = [d for d in self.detections if getattr(d, attr) is not None and d.confidence >= threshold]
        return max(ok, key=lambda d: d.confidence).__getattribute__(attr) if ok else None


@dataclass(frozen=True)
class TickEvent:
    t: float
    perception: PerceptionOutcome | None = None
    in_contact: bool = False
    trajectory_done: bool = False
    command: str | None = None  # "start" launches a harvest from Idle or Home


@dataclass(frozen=True)
class FsmState:
    phase: Phase = Phase.IDLE
    mode: Mode = Mode.AUTONOMOUS
    phase_since: float = 0.0
    mode_since: float = float("-inf")
    target: Pose | None = None  # peduncle (or bunch while the peduncle is unknown)
    peduncle_known: bool = False
    contact_seen: bool = False  # at least one contact episode while guided
    done: bool = False  # harvest finished, resting at Home
    events: tuple[str, ...] = field(default=())  # emitted on the last step

    def __post_init__(self):
        if (self.phase is Phase.AWAIT_HUMAN) != (self.mode is Mode.GUIDED):
            raise ValueError("AwaitHuman and Guided mode go together")


def _enter(s: FsmState, t: float, phase: Phase, *events, **kw) -> FsmState:
    mode = Mode.GUIDED if phase is Phase.AWAIT_HUMAN else Mode.AUTONOMOUS
    mode_since = t if mode is not s.mode else s.mode_since
    return replace(s, phase=phase, mode=mode, phase_since=t, mode_since=mode_since, events=(f"enter {phase.value}",) + events, **kw)


def step(s: FsmState, ev: TickEvent, dwell: float = MODE_DWELL) -> FsmState:
    if ev.t < s.phase_since:
        raise ValueError("event time went backwards")
    s = replace(s, events=())
    p = s.phase

    if ev.command is not None:
        if ev.command == "start" and p in (Phase.IDLE, Phase.HOME):
            return _enter(s, ev.t, Phase.DETECT_HEAD, target=None, peduncle_known=False, done=False)
        log.info("ignored command %r in phase %s", ev.command, p.value)
        return s

    if p is Phase.DETECT_HEAD and ev.perception is not None and ev.perception.source == "head":
        ped = ev.perception.best("peduncle")
        if ped is not None:
            return _enter(s, ev.t, Phase.MOVE_PRE_GRASP, "peduncle found (head)", target=ped, peduncle_known=True)
        bunch = ev.perception.best("bunch")
        if bunch is not None:
            return _enter(s, ev.t, Phase.MOVE_PRE_GRASP, "bunch found, peduncle unknown", target=bunch, peduncle_known=False)
        return _enter(s, ev.t, Phase.HOME, "nothing detected")

    if p is Phase.MOVE_PRE_GRASP and ev.trajectory_done:
        if s.peduncle_known:
            return _enter(s, ev.t, Phase.GRASP)
        return _enter(s, ev.t, Phase.DETECT_WRIST)

    if p is Phase.DETECT_WRIST and ev.perception is not None and ev.perception.source == "wrist":
        ped = ev.perception.best("peduncle")
        if ped is not None:
            return _enter(s, ev.t, Phase.GRASP, "peduncle found (wrist)", target=ped, peduncle_known=True)
        if ev.t - s.mode_since < dwell:
            return s  # too soon for another mode change; retry next tick
        return _enter(s, ev.t, Phase.AWAIT_HUMAN, "peduncle not found", "tts: please guide the gripper to the peduncle", contact_seen=False)

    if p is Phase.AWAIT_HUMAN:
        if ev.in_contact:
            if not s.contact_seen:
                return replace(s, contact_seen=True, events=("human contact",))
            return s
        # the contact signal is already debounced: its release edge comes after the no-contact dwell
        if s.contact_seen and ev.t - s.mode_since >= dwell:
            return _enter(s, ev.t, Phase.GRASP, "human released, resuming", target=None, peduncle_known=True, contact_seen=False)
        return s

    if ev.trajectory_done:
        if p is Phase.GRASP:
            return _enter(s, ev.t, Phase.CUT, "gripper_close", "cutter_actuate")
        if p is Phase.CUT:
            return _enter(s, ev.t, Phase.DEPOSIT)
        if p is Phase.DEPOSIT:
            return _enter(s, ev.t, Phase.HOME, "gripper_open")
        if p is Phase.HOME and not s.done:
            return replace(s, done=True, events=("harvest complete",))
    return s


@dataclass(frozen=True)
class HierarchyOptions:
    operational: str = "auto"  # auto (by mode) | admittance | hand_guiding | none
    posture: bool = True
    posture_driver: str = "hold"  # hold | sinusoid
    regularization: float = 1e-4

    def __post_init__(self):
        if self.operational not in ("auto", "admittance", "hand_guiding", "none"):
            raise ValueError(f"unknown operational task {self.operational!r}")
        if self.posture_driver not in ("hold", "sinusoid"):
            raise ValueError(f"unknown posture driver {self.posture_driver!r}")


@dataclass(frozen=True)
class HierarchySpec:
    operational: str | None  # admittance | hand_guiding | None
    posture: bool

    @property
    def levels(self) -> tuple[str, ...]:
        out = ["safety"]
        if self.operational:
            out.append(self.operational)
        if self.posture:
            out.append("posture")
        return tuple(out)


def hierarchy_for_mode(s: FsmState, opts: HierarchyOptions = HierarchyOptions()) -> HierarchySpec:
    """Safety first, then the mode's operational task, then the optional posture task."""
    if opts.operational == "auto":
        op = "hand_guiding" if s.mode is Mode.GUIDED else "admittance"
    elif opts.operational == "none":
        op = None
    else:
        op = opts.operational
    return HierarchySpec(op, opts.posture)
