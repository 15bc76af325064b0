import numpy as np
import pytest

from hqp_harvest.hierarchy import (
    CascadeError,
    FREEZE_TOLERANCE,
    Hierarchy,
    TaskConstraint,
    nullspace_reference,
    solve_cascade,
    stage_problem,
    stack,
)
from hqp_harvest.qpcore import INF
from oracles import nullspace_projection


def eq(J, b, w=1e6, label=""):
    return TaskConstraint.equality(np.atleast_2d(J), np.atleast_1d(b), w, label)


def two_level():
    return Hierarchy(([eq([1, 0], 1, label="L1")], [eq([1, 1], 0, label="L2")]), n_u=2, regularization=1e-4)


def test_two_conflicting_levels():
    sol = solve_cascade(two_level())
    np.testing.assert_allclose(sol.qdot, [1, -1], atol=1e-6)
    assert sol.slack_norms[0] < 1e-6
    assert sol.statuses == ["optimal", "optimal"]


def test_clamping_by_frozen_inequality():
    h = Hierarchy(
        ([TaskConstraint([[1, 0]], -0.5, 0.5, 1e6)], [eq([1, 0], 2)]),
        n_u=2,
        regularization=1e-4,
    )
    sol = solve_cascade(h)
    assert sol.qdot[0] == pytest.approx(0.5, abs=1e-9)
    assert sol.slacks[1][0] == pytest.approx(1.5, abs=1e-6)


def test_single_empty_level_gives_zero():
    sol = solve_cascade(Hierarchy(((),), n_u=4))
    np.testing.assert_array_equal(sol.qdot, np.zeros(4))


def test_stage_problem_construction():
    h = two_level()
    p1 = stage_problem(h, 0, [])
    assert p1.m == 1 and p1.n == 3
    p2 = stage_problem(h, 1, [np.zeros(1)])
    np.testing.assert_array_equal(p2.A, [[1, 0, 0], [1, 1, 1]])
    # the frozen row is widened by FREEZE_TOLERANCE, the stage's own row is not
    np.testing.assert_array_equal(p2.lo, [1 - FREEZE_TOLERANCE, 0])
    np.testing.assert_array_equal(p2.hi, [1 + FREEZE_TOLERANCE, 0])
    empty = stage_problem(Hierarchy(((),), n_u=3), 0, [])
    assert empty.m == 0
    with pytest.raises(IndexError):
        stage_problem(h, 2, [np.zeros(1), np.zeros(1)])


def test_frozen_slack_shifts_bounds():
    h = two_level()
    p2 = stage_problem(h, 1, [np.array([0.25])])
    assert p2.lo[0] == pytest.approx(0.75) and p2.hi[0] == pytest.approx(0.75)


def test_nullspace_reference_examples():
    b0 = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(nullspace_reference([(np.eye(3), b0)]), b0)
    q = nullspace_reference([(np.array([[1, 0, 0]]), [2.0]), (np.array([[0, 1, 0]]), [-1.0])])
    np.testing.assert_allclose(q, [2, -1, 0], atol=1e-12)
    q = nullspace_reference([(np.array([[1, 0]]), [1.0]), (np.array([[1, 1]]), [0.0])])
    np.testing.assert_allclose(q, [1, -1], atol=1e-12)
    np.testing.assert_allclose(q, solve_cascade(two_level()).qdot, atol=1e-6)


def test_nullspace_reference_agrees_with_textbook_recursion():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = 6
        levels = [(rng.standard_normal((2, n)), rng.standard_normal(2)) for _ in range(3)]
        np.testing.assert_allclose(nullspace_reference(levels), nullspace_projection(levels), atol=1e-9)


def random_equality_hierarchy(rng):
    n = int(rng.integers(3, 11))
    k = int(rng.integers(2, 4))
    levels = []
    for _ in range(k):
        m = int(rng.integers(1, max(2, n // 2) + 1))
        levels.append((rng.standard_normal((m, n)), rng.standard_normal(m)))
    return n, levels


def test_cascade_matches_nullspace_projection_on_random_hierarchies():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n, levels = random_equality_hierarchy(rng)
        h = Hierarchy(tuple([eq(J, b, 1e8)] for J, b in levels), n_u=n, regularization=1e-8)
        sol = solve_cascade(h)
        ref = nullspace_reference(levels)
        assert np.linalg.norm(sol.qdot - ref) < 1e-6 * (1 + np.linalg.norm(ref))


def test_slack_freeze_consistency():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n, levels = random_equality_hierarchy(rng)
        h = Hierarchy(tuple([eq(J, b, 1e6)] for J, b in levels), n_u=n)
        sol = solve_cascade(h)
        for (J, b), w in zip(levels, sol.slacks):
            np.testing.assert_allclose(b - J @ sol.qdot, w, atol=1e-8)


def test_lexicographic_optimality_spot_check():
    rng = np.random.default_rng(3)
    J1 = rng.standard_normal((2, 5))
    b1 = rng.standard_normal(2)
    J2 = rng.standard_normal((4, 5))
    b2 = rng.standard_normal(4)
    h = Hierarchy(
        ([TaskConstraint(J1, b1 - 0.1, b1 + 0.1, 1e6)], [eq(J2, b2, 1e6)]),
        n_u=5,
        regularization=1e-8,
    )
    sol = solve_cascade(h)
    c1 = h.levels[0][0]
    base_viol = np.linalg.norm(c1.violation(sol.qdot))
    base_obj = np.linalg.norm(J2 @ sol.qdot - b2)
    for _ in range(200):
        d = rng.standard_normal(5)
        d *= 1e-3 / np.linalg.norm(d)
        q = sol.qdot + d
        worse_high = np.linalg.norm(c1.violation(q)) > base_viol + 1e-9
        assert worse_high or np.linalg.norm(J2 @ q - b2) >= base_obj - 1e-9


def test_contradictory_hard_rows_raise():
    hard = (TaskConstraint([[1, 0]], 0.5, 1.0, 1.0, "box_a"), TaskConstraint([[1, 0]], -1.0, -0.5, 1.0, "box_b"))
    h = Hierarchy(([eq([0, 1], 1)],), n_u=2, hard=hard)
    with pytest.raises(CascadeError) as err:
        solve_cascade(h)
    assert err.value.level == 0
    assert err.value.status == "infeasible"


def test_continuity_under_smoothly_varying_bounds():
    # documented constant for this toy sequence: |dq| <= C Ts with C = 2
    Ts = 0.01
    prev = None
    for k in range(200):
        t = k * Ts
        lim = 0.5 + 0.3 * np.sin(t)
        h = Hierarchy(
            ([TaskConstraint(np.eye(2), -lim, lim, 1e6)], [eq([1, 1], 2.0 + np.cos(t), 1e4)]),
            n_u=2,
        )
        q = solve_cascade(h).qdot
        if prev is not None:
            assert np.linalg.norm(q - prev) <= 2.0 * Ts
        prev = q


def test_task_constraint_validation_and_stack():
    with pytest.raises(ValueError):
        TaskConstraint([[1, 0]], 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        TaskConstraint([[1, 0]], 0.0, 1.0, 0.0)
    a = TaskConstraint([[1, 0]], -np.inf, 1.0, 1.0, "a")
    assert a.lo[0] == -INF
    s = stack([a, eq([0, 1], 2, label="b")])
    assert s.m == 2 and s.row_labels == ("a", "b")
    with pytest.raises(ValueError):
        Hierarchy(([eq([1, 0, 0], 1)],), n_u=2)
