"""Dense strictly convex QP solver for one stage of the task cascade.

Solves::

    minimize    1/2 z' H z + g' z
    subject to  lo <= A z <= hi

with a Goldfarb-Idnani dual active-set method. Rows with ``lo == hi`` are
equalities. Bounds at or beyond ``INF`` (1e12) are treated as absent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr_delete, qr_insert, solve_triangular
from scipy.linalg.lapack import dtrtrs

INF = 1e12
REGULARIZATION = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        n = self.H.shape[0]
        if self.H.shape != (n, n) or self.g.shape != (n,):
            raise ValueError("H must be n x n and g of length n")
        if self.A.ndim != 2 or self.A.shape[1] != n:
            raise ValueError(f"A must have {n} columns, got {self.A.shape}")
        m = self.A.shape[0]
        if self.lo.shape != (m,) or self.hi.shape != (m,):
            raise ValueError("lo and hi must have one entry per row")
        if not (np.array_equal(self.H, self.H.T) or np.allclose(self.H, self.H.T, atol=1e-10, rtol=0.0)):
            raise ValueError("H is not symmetric")
        if np.any(self.lo > self.hi):
            raise ValueError(f"lo > hi at row {int(np.flatnonzero(self.lo > self.hi)[0])}")

    @classmethod
    def from_rows(cls, H, g, rows):
        """Build from ``(a, lo, hi)`` triples; infinite bounds become +-INF."""
        H = np.asarray(H, dtype=float)
        n = H.shape[0]
        if rows:
            A = np.array([np.asarray(a, dtype=float) for a, _, _ in rows]).reshape(len(rows), n)
            lo = np.array([max(float(l), -INF) for _, l, _ in rows])
            hi = np.array([min(float(h), INF) for _, _, h in rows])
        else:
            A, lo, hi = np.zeros((0, n)), np.zeros(0), np.zeros(0)
        return cls(H, np.asarray(g, dtype=float), A, lo, hi)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def cost(self, z) -> float:
        return 0.5 * z @ self.H @ z + self.g @ z


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    status: str
    active: tuple[int, ...]
    multipliers: np.ndarray  # > 0 at an active lower bound, < 0 at an active upper bound
    kkt: KktResiduals
    iterations: int

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def verify_kkt(problem: QpProblem, z, multipliers) -> KktResiduals:
    """Stationarity, primal feasibility and complementarity violations (max-norms).

    Stationarity is relative to ``1 + |Hz| + |g|``; the other two are absolute.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(multipliers, dtype=float)
    if z.shape != (problem.n,) or y.shape != (problem.m,):
        raise ValueError("solution dimensions do not match the problem")
    Hz = problem.H @ z
    grad = Hz + problem.g - problem.A.T @ y
    scale = 1.0 + max(np.max(np.abs(Hz), initial=0.0), np.max(np.abs(problem.g), initial=0.0))
    stat = float(np.max(np.abs(grad), initial=0.0) / scale)
    Az = problem.A @ z
    lo_fin = problem.lo > -INF
    hi_fin = problem.hi < INF
    viol = np.zeros(problem.m)
    viol = np.where(lo_fin, np.maximum(viol, problem.lo - Az), viol)
    viol = np.where(hi_fin, np.maximum(viol, Az - problem.hi), viol)
    primal = float(np.max(viol, initial=0.0))
    ypos, yneg = np.maximum(y, 0.0), np.maximum(-y, 0.0)
    # multipliers on an absent bound are a dual-feasibility violation
    comp = np.where(lo_fin, ypos * np.abs(Az - problem.lo), ypos)
    comp = np.maximum(comp, np.where(hi_fin, yneg * np.abs(problem.hi - Az), yneg))
    return KktResiduals(stat, primal, float(np.max(comp, initial=0.0)))


def _factor(H):
    n = H.shape[0]
    if np.count_nonzero(H - np.diag(np.diagonal(H))) == 0:
        d = np.diagonal(H).copy()
        if np.all(d > 0):
            return ("diag", 1.0 / np.sqrt(d))
        d = d + REGULARIZATION
        if np.all(d > 0):
            return ("diag", 1.0 / np.sqrt(d))
    try:
        c = cho_factor(H, lower=True)
    except np.linalg.LinAlgError:
        c = cho_factor(H + REGULARIZATION * np.eye(n), lower=True)
    L = np.tril(c[0])
    return ("dense", solve_triangular(L, np.eye(n), lower=True), c)


def _initial_equalities(A, rows, b, x0, L_inv_cols, L_invT, n):
    """Optimum over the equality rows alone, or None if they are rank deficient.

    Returns ``(x, u, B, Q, R)`` with ``B = L^-1 N`` and its complete QR.
    """
    if rows.size == 0 or rows.size > n:
        return None
    B = L_inv_cols(A[rows].T)
    Q, R = np.linalg.qr(B, mode="complete")
    dg = np.abs(np.diagonal(R))
    if dg.min() <= 1e-10 * max(dg.max(), 1e-300):
        return None
    k = rows.size
    Rk = R[:k, :k]
    w = solve_triangular(Rk, b - A[rows] @ x0, trans="T", check_finite=False)
    u = solve_triangular(Rk, w, check_finite=False)
    x = x0 + L_invT(Q[:, :k] @ w)
    return x, u, B, Q, R


def solve(problem: QpProblem, tolerance: float = 1e-9, max_iter: int | None = None) -> QpSolution:
    """Solve the QP. Deterministic: identical input gives an identical result.

    Equality rows start in the active set when they are linearly independent.
    After that the most violated constraint is added at each outer iteration;
    ties go to the lowest row index. Rows are scaled to unit norm internally, so
    ``tolerance`` bounds the violation in distance units.
    """
    H, g = problem.H, problem.g
    n, m = problem.n, problem.m
    row_norm = np.linalg.norm(problem.A, axis=1) if m else np.zeros(0)
    scale = np.where(row_norm > 0.0, row_norm, 1.0)
    has_lo = problem.lo > -INF
    has_hi = problem.hi < INF
    A = problem.A / scale[:, None]
    lo, hi = problem.lo / scale, problem.hi / scale
    if max_iter is None:
        max_iter = 10 * (n + m) + 50
    fac = _factor(H)
    if fac[0] == "diag":
        linv = fac[1]
        x = -(linv * linv) * g

        def L_inv(v):
            return linv * v

        def L_inv_cols(M):
            return linv[:, None] * M

        def L_invT(M):
            return linv[:, None] * M if M.ndim == 2 else linv * M

    else:
        Li = fac[1]
        x = -cho_solve(fac[2], g)

        def L_inv(v):
            return Li @ v

        L_inv_cols = L_inv

        def L_invT(M):
            return Li.T @ M

    is_eq = (problem.lo == problem.hi) & has_lo

    act_rows: list[int] = []
    act_sign: list[float] = []
    u = np.zeros(0)
    Q, R = np.eye(n), np.zeros((n, 0))  # complete QR of B
    lo_eff = np.where(has_lo, lo, -np.inf)
    hi_eff = np.where(has_hi, hi, np.inf)
    skip = np.zeros(m, dtype=bool)  # active or found redundant
    it = 0
    status = OPTIMAL

    eq_rows = np.flatnonzero(is_eq)
    start = _initial_equalities(A, eq_rows, lo[eq_rows], x, L_inv_cols, L_invT, n) if m else None
    if start is not None:
        x, u, _, Q, R = start
        act_rows = [int(r) for r in eq_rows]
        act_sign = [1.0] * len(act_rows)
        skip[eq_rows] = True
        it = len(act_rows)

    while True:
        if m == 0:
            break
        Ax = A @ x
        v_lo = lo_eff - Ax
        v_hi = Ax - hi_eff
        viol = np.maximum(v_lo, v_hi)
        viol[skip] = -np.inf
        p = int(np.argmax(viol))
        if not viol[p] > tolerance:
            break
        sign = 1.0 if v_lo[p] >= v_hi[p] else -1.0
        bp = lo[p] if sign > 0 else hi[p]
        npv = sign * A[p]
        lnp = L_inv(npv)
        up = 0.0

        while True:
            it += 1
            if it > max_iter:
                status = MAX_ITERATIONS
                break
            q = len(act_rows)
            d = Q.T @ lnp
            d1, d2 = d[:q], d[q:]
            dn2 = d @ d
            dependent = q >= n or d2 @ d2 <= 1e-20 * max(dn2, 1e-300)
            if q:
                r = dtrtrs(R[:q, :q], d1)[0]
                thresh = 1e-12 * max(1.0, np.abs(r).max())
                ok = np.flatnonzero((r > thresh) & ~is_eq[act_rows])
                if ok.size:
                    ratios = u[ok] / r[ok]
                    j = int(np.argmin(ratios))
                    l, t1 = int(ok[j]), ratios[j]
                else:
                    l, t1 = -1, np.inf
            else:
                r, t1, l = np.zeros(0), np.inf, -1
            sp = npv @ x - sign * bp
            if dependent:
                t2 = np.inf
                z = None
            else:
                z = L_invT(Q[:, q:] @ d2)
                t2 = -sp / (z @ npv)
            t = min(t1, t2)
            if not np.isfinite(t):
                if dependent and -sp <= 1e3 * tolerance:
                    skip[p] = True  # consistent with the active set up to round-off
                    break
                status = INFEASIBLE
                break
            u = u - t * r
            up += t
            if z is not None:
                x = x + t * z
                if t2 <= t1:
                    act_rows.append(p)
                    act_sign.append(sign)
                    u = np.append(u, up)
                    if q:
                        Q, R = qr_insert(Q, R, lnp, q, which="col", check_finite=False)
                    else:
                        Q, R = np.linalg.qr(lnp[:, None], mode="complete")
                    skip[p] = True
                    break
            # partial step: drop constraint l and retry adding p
            drop = act_rows.pop(l)
            act_sign.pop(l)
            skip[drop] = False
            u = np.delete(u, l)
            if q > 1:
                Q, R = qr_delete(Q, R, l, 1, which="col", check_finite=False)
            else:
                Q, R = np.eye(n), np.zeros((n, 0))
        if status != OPTIMAL:
            break

    y = np.zeros(m)
    for row, s, uk in zip(act_rows, act_sign, u):
        y[row] = s * uk / scale[row]
    kkt = verify_kkt(problem, x, y) if status == OPTIMAL else KktResiduals(np.inf, np.inf, np.inf)
    return QpSolution(x, status, tuple(sorted(act_rows)), y, kkt, it)
