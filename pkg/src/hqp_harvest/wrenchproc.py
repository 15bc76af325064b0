"""Wrist force/torque preprocessing: payload compensation and contact detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Wrench
from .rotations import cross3, quat_to_matrix

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class PayloadModel:
    mass: float = 0.0
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))  # sensor frame
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("payload mass must be >= 0")
        object.__setattr__(self, "com", np.asarray(self.com, dtype=float))
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))

    def gravity_wrench(self, o) -> Wrench:
        """Wrench the payload weight exerts on the sensor, in sensor coordinates."""
        f = quat_to_matrix(o).T @ (self.mass * self.gravity)
        return Wrench(f, cross3(self.com, f), "sensor")


@dataclass(frozen=True)
class ContactConfig:
    theta_hi: float = 2.0  # N, enter contact above
    theta_lo: float = 1.0  # N, leave contact below
    debounce: float = 3.0  # s

    def __post_init__(self):
        if not 0 <= self.theta_lo < self.theta_hi:
            raise ValueError("need 0 <= theta_lo < theta_hi")
        if self.debounce < 0:
            raise ValueError("debounce must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> ContactConfig:
        return cls(float(d.get("theta_hi_N", 2.0)), float(d.get("theta_lo_N", 1.0)), float(d.get("debounce_s", 3.0)))


@dataclass(frozen=True)
class ContactState:
    in_contact: bool = False
    since: float = -np.inf  # time of the last transition
    wrench: Wrench = field(default_factory=Wrench.zero)
    quiet_since: float | None = None  # start of the current below-threshold stretch while in contact


def compensate_payload(raw: Wrench, o, payload: PayloadModel) -> Wrench:
    """Subtract the payload gravity wrench from a sensor-frame measurement."""
    g = payload.gravity_wrench(o)
    return Wrench(raw.f - g.f, raw.mu - g.mu, raw.frame)


def sensor_to_world(w: Wrench, R_sensor, p_sensor, p_ref) -> Wrench:
    """Express a sensor-frame wrench in world axes, moment taken about ``p_ref``."""
    f = R_sensor @ w.f
    mu = R_sensor @ w.mu + cross3(np.asarray(p_sensor) - np.asarray(p_ref), f)
    return Wrench(f, mu, "world")


_EPS_T = 1e-9  # absorbs round-off in tick times


def classify_contact(w: Wrench, prev: ContactState, cfg: ContactConfig, t: float) -> ContactState:
    """Hysteresis classifier on the force norm.

    Contact starts when ``|f| > theta_hi``; it ends once ``|f| < theta_lo`` has held
    for ``debounce`` seconds. Two transitions are never closer than ``debounce``.
    Outside contact the output wrench is exactly zero.
    """
    if t < prev.since:
        raise ValueError("time went backwards")
    fn = np.linalg.norm(w.f)
    settled = t - prev.since >= cfg.debounce - _EPS_T
    if not prev.in_contact:
        if fn > cfg.theta_hi and settled:
            return ContactState(True, t, w, None)
        return ContactState(False, prev.since, Wrench.zero(w.frame), None)
    if fn < cfg.theta_lo:
        quiet = t if prev.quiet_since is None else prev.quiet_since
        if t - quiet >= cfg.debounce - _EPS_T and settled:
            return ContactState(False, t, Wrench.zero(w.frame), None)
        return ContactState(True, prev.since, w, quiet)
    return ContactState(True, prev.since, w, None)
