"""Lexicographic task hierarchy solved as a cascade of QPs.

Level ``i`` minimizes ``1/2 qd' Q qd + w' Qw w`` subject to its own rows
``lo <= J qd + w <= hi`` while every higher level ``k`` is held at its optimal
slack: ``lo_k - w*_k <= J_k qd <= hi_k - w*_k``.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import qpcore
from .qpcore import INF, QpProblem

SAFETY_SLACK_WEIGHT = 1e6
OPERATIONAL_SLACK_WEIGHT = 1e4
OPTIMIZATION_SLACK_WEIGHT = 1e2
DEFAULT_REGULARIZATION = 1e-4
FREEZE_TOLERANCE = 1e-9  # relative widening of the frozen bounds of higher levels


@dataclass(frozen=True)
class TaskConstraint:
    """One block of rows ``lo <= J qd <= hi`` with per-row slack weights."""

    J: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    slack_weight: np.ndarray
    label: str = ""
    row_labels: tuple[str, ...] = ()
    barrier: np.ndarray | None = None  # barrier values h per row, for logging only

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.J, dtype=float))
        m = J.shape[0]
        lo = np.maximum(np.asarray(self.lo, dtype=float), -INF) * np.ones(m)
        hi = np.minimum(np.asarray(self.hi, dtype=float), INF) * np.ones(m)
        sw = np.asarray(self.slack_weight, dtype=float) * np.ones(m)
        if np.any(lo > hi):
            raise ValueError(f"{self.label}: lo > hi")
        if np.any(sw <= 0):
            raise ValueError(f"{self.label}: slack weights must be positive")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "slack_weight", sw)

    @property
    def m(self) -> int:
        return self.J.shape[0]

    @classmethod
    def equality(cls, J, b, slack_weight, label=""):
        return cls(J, b, b, slack_weight, label)

    def violation(self, qdot) -> np.ndarray:
        """Signed slack needed at ``qdot``: positive below ``lo``, negative above ``hi``."""
        Jq = self.J @ qdot
        return np.where(Jq < self.lo, self.lo - Jq, np.where(Jq > self.hi, self.hi - Jq, 0.0))


def stack(constraints, label=None) -> TaskConstraint:
    """Concatenate several constraints into one block."""
    constraints = [c for c in constraints if c.m]
    if not constraints:
        raise ValueError("nothing to stack")
    rl, bar = [], []
    for c in constraints:
        rl.extend(c.row_labels or (c.label,) * c.m)
        bar.append(c.barrier if c.barrier is not None else np.full(c.m, np.nan))
    return TaskConstraint(
        np.vstack([c.J for c in constraints]),
        np.concatenate([c.lo for c in constraints]),
        np.concatenate([c.hi for c in constraints]),
        np.concatenate([c.slack_weight for c in constraints]),
        label or "+".join(c.label for c in constraints),
        tuple(rl),
        np.concatenate(bar),
    )


@dataclass(frozen=True)
class Hierarchy:
    levels: tuple[tuple[TaskConstraint, ...], ...]
    n_u: int
    regularization: float = DEFAULT_REGULARIZATION
    hard: tuple[TaskConstraint, ...] = ()  # unslacked rows applied at every stage

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a hierarchy needs at least one level")
        levels = tuple(tuple(lv) for lv in self.levels)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "hard", tuple(self.hard))
        for c in [c for lv in levels for c in lv] + list(self.hard):
            if c.J.shape[1] != self.n_u:
                raise ValueError(f"{c.label}: Jacobian has {c.J.shape[1]} columns, expected {self.n_u}")

    def level_rows(self, i: int):
        cs = self.levels[i]
        if not cs:
            z = np.zeros((0, self.n_u))
            return z, np.zeros(0), np.zeros(0), np.zeros(0)
        return (
            np.vstack([c.J for c in cs]),
            np.concatenate([c.lo for c in cs]),
            np.concatenate([c.hi for c in cs]),
            np.concatenate([c.slack_weight for c in cs]),
        )


@dataclass
class HqpSolution:
    qdot: np.ndarray
    slacks: list[np.ndarray]
    statuses: list[str]
    solve_time: float
    iterations: list[int] = field(default_factory=list)

    @property
    def slack_norms(self) -> list[float]:
        return [float(np.linalg.norm(w)) for w in self.slacks]


class CascadeError(RuntimeError):
    def __init__(self, level: int, status: str, labels=()):
        self.level = level
        self.status = status
        self.labels = tuple(labels)
        super().__init__(f"stage {level + 1} failed ({status}); constraints: {', '.join(self.labels) or '-'}")


def stage_problem(h: Hierarchy, i: int, frozen) -> QpProblem:
    """QP for level ``i`` (0-based). Decision vector is ``(qdot, w_i)``."""
    if not 0 <= i < len(h.levels):
        raise IndexError(f"level {i} out of range")
    if len(frozen) < i:
        raise ValueError("frozen slacks missing for higher levels")
    n = h.n_u
    J, lo, hi, sw = h.level_rows(i)
    mi = J.shape[0]
    dim = n + mi
    H = np.zeros((dim, dim))
    H[np.arange(n), np.arange(n)] = h.regularization
    H[np.arange(n, dim), np.arange(n, dim)] = 2.0 * sw

    blocks_A, blocks_lo, blocks_hi, labels = [], [], [], []
    for c in h.hard:
        blocks_A.append(np.hstack([c.J, np.zeros((c.m, mi))]))
        blocks_lo.append(c.lo)
        blocks_hi.append(c.hi)
        labels.extend([c.label] * c.m)
    for k in range(i):
        Jk, lok, hik, _ = h.level_rows(k)
        if not Jk.shape[0]:
            continue
        w = np.asarray(frozen[k])
        blocks_A.append(np.hstack([Jk, np.zeros((Jk.shape[0], mi))]))
        blo_k, bhi_k = lok - w, hik - w
        # a hair of slack so round-off in the frozen optimum cannot make this stage infeasible
        scale = np.maximum(np.linalg.norm(Jk, axis=1), 1.0)
        blocks_lo.append(np.where(lok > -INF, blo_k - FREEZE_TOLERANCE * np.maximum(scale, np.abs(blo_k)), -INF))
        blocks_hi.append(np.where(hik < INF, bhi_k + FREEZE_TOLERANCE * np.maximum(scale, np.abs(bhi_k)), INF))
        for c in h.levels[k]:
            labels.extend([c.label] * c.m)
    if mi:
        blocks_A.append(np.hstack([J, np.eye(mi)]))
        blocks_lo.append(lo)
        blocks_hi.append(hi)
        for c in h.levels[i]:
            labels.extend([c.label] * c.m)
    if blocks_A:
        A = np.vstack(blocks_A)
        blo, bhi = np.concatenate(blocks_lo), np.concatenate(blocks_hi)
    else:
        A, blo, bhi = np.zeros((0, dim)), np.zeros(0), np.zeros(0)
    return QpProblem(H, np.zeros(dim), A, np.clip(blo, -INF, INF), np.clip(bhi, -INF, INF), tuple(labels))


def solve_cascade(h: Hierarchy, tolerance: float = 1e-9, warn_on_safety_slack: bool = False) -> HqpSolution:
    t0 = time.perf_counter()
    frozen: list[np.ndarray] = []
    statuses, iters = [], []
    qdot = np.zeros(h.n_u)
    for i in range(len(h.levels)):
        prob = stage_problem(h, i, frozen)
        sol = qpcore.solve(prob, tolerance)
        statuses.append(sol.status)
        iters.append(sol.iterations)
        if not sol.ok:
            viol = np.zeros(prob.m)
            if sol.status != qpcore.MAX_ITERATIONS:
                Az = prob.A @ sol.z
                viol = np.maximum(prob.lo - Az, Az - prob.hi)
            worst = [prob.labels[j] for j in np.argsort(-viol)[:3]] if prob.m else []
            raise CascadeError(i, sol.status, worst)
        qdot = sol.z[: h.n_u]
        w = sol.z[h.n_u :]
        if w.size:
            w = np.where(np.abs(w) < 1e-12, 0.0, w)  # round-off, keeps frozen bounds tidy
        frozen.append(w)
        if warn_on_safety_slack and i == 0 and w.size and np.max(np.abs(w)) > 1e-6:
            warnings.warn(f"safety level relaxed by {np.max(np.abs(w)):.3g}", RuntimeWarning, stacklevel=2)
    return HqpSolution(qdot, frozen, statuses, time.perf_counter() - t0, iters)


def nullspace_reference(equality_levels, threshold: float = 1e-8) -> np.ndarray:
    """Recursive null-space projection solution for pure equality tasks.

    ``qdot = sum_i (J_i N_{i-1})^+ (b_i - J_i qdot_{i-1})`` with pseudo-inverses
    truncated at singular values below ``threshold``.
    """
    J0 = np.atleast_2d(equality_levels[0][0])
    n = J0.shape[1]
    qdot = np.zeros(n)
    N = np.eye(n)
    for J, b in equality_levels:
        J = np.atleast_2d(np.asarray(J, dtype=float))
        JN = J @ N
        U, s, Vt = np.linalg.svd(JN, full_matrices=False)
        keep = s > threshold
        pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
        qdot = qdot + pinv @ (np.asarray(b, dtype=float) - J @ qdot)
        N = N - pinv @ JN
    return qdot
