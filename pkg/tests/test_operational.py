import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hqp_harvest.model import EE_FRAMES, JointState, Kinematics, default_model_path, load_model
from hqp_harvest.operational import (
    K_JC,
    AdmittanceParams,
    CartesianReference,
    ControllerMemory,
    admittance_constraint,
    hand_guiding_constraint,
    pose_error,
    preferred_posture_constraint,
    quaternion_error,
    sinusoid_posture_target,
)
from hqp_harvest.rotations import axis_angle_quat, quat_to_matrix

TS = 0.01


@pytest.fixture(scope="module")
def model():
    return load_model(default_model_path())


def test_quaternion_error_examples():
    o = axis_angle_quat([0, 1, 0], 0.3)
    np.testing.assert_allclose(quaternion_error(o, o), 0, atol=1e-15)
    np.testing.assert_allclose(quaternion_error(axis_angle_quat([0, 0, 1], np.pi / 2), [1, 0, 0, 0]), [0, 0, np.sqrt(0.5)])
    np.testing.assert_allclose(quaternion_error(-o, o), 0, atol=1e-15)


unit = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 0.1)


@settings(max_examples=200, deadline=None)
@given(unit, unit)
def test_quaternion_error_zero_iff_same_rotation(a, b):
    a = np.array(a) / np.linalg.norm(a)
    b = np.array(b) / np.linalg.norm(b)
    same = np.allclose(quat_to_matrix(a), quat_to_matrix(b), atol=1e-9)
    zero = np.linalg.norm(quaternion_error(a, b)) < 1e-9
    assert same == zero


def test_admittance_params_defaults():
    p = AdmittanceParams()
    np.testing.assert_array_equal(np.diag(p.Km)[:6], [20, 20, 20, 3, 3, 3])
    np.testing.assert_array_equal(np.diag(p.Kd)[6:], [253, 253, 253, 27, 27, 27])
    np.testing.assert_array_equal(np.diag(p.Kp)[:6], [800, 800, 800, 60, 60, 60])
    assert p.compliant().kp_p == 0.0
    with pytest.raises(ValueError):
        AdmittanceParams(km_p=0.0)


def current_ref(kin):
    return CartesianReference.hold([kin.pose(f) for f in EE_FRAMES])


def test_admittance_row_scaling(model):
    st0 = JointState(model.home_q(), np.zeros(model.n_u))
    kin = Kinematics(model, st0.q)
    c = admittance_constraint(model, st0, ControllerMemory(TS), current_ref(kin), None, AdmittanceParams())
    J = kin.stacked_ee_jacobian()
    np.testing.assert_allclose(c.J[0], 2253 * J[0])
    np.testing.assert_allclose(c.J[3], 327 * J[3])
    np.testing.assert_allclose(c.lo, 0, atol=1e-9)


def test_perfect_tracking_persists(model):
    rng = np.random.default_rng(0)
    st0 = JointState(model.home_q(), np.zeros(model.n_u))
    kin = Kinematics(model, st0.q)
    v_d, a_d = rng.standard_normal(12), rng.standard_normal(12)
    ref = CartesianReference([kin.pose(f) for f in EE_FRAMES], v_d, a_d)
    mem = ControllerMemory(TS, v_d - TS * a_d)
    c = admittance_constraint(model, st0, mem, ref, np.zeros(12), AdmittanceParams(), kin)
    qdot = np.linalg.lstsq(kin.stacked_ee_jacobian(), v_d, rcond=None)[0]
    np.testing.assert_allclose(c.J @ qdot, c.lo, rtol=1e-9, atol=1e-9)


def test_first_tick_memory_uses_measured_twist(model):
    q = model.home_q()
    qdot = np.linspace(-0.1, 0.1, model.n_u)
    mem = ControllerMemory(TS)
    kin = Kinematics(model, q)
    hand_guiding_constraint(model, JointState(q, qdot), mem, None, AdmittanceParams().compliant(), kin)
    np.testing.assert_allclose(mem.v_prev, kin.stacked_ee_jacobian() @ qdot)


def closed_loop(model, build, steps, wrench):
    """Integrate q with the least-norm exact solution of the equality task alone."""
    q = model.home_q()
    mem = ControllerMemory(TS)
    qdot = np.zeros(model.n_u)
    hist = []
    for k in range(steps):
        kin = Kinematics(model, q)
        c = build(JointState(q, qdot), mem, kin, wrench(k * TS))
        qdot = np.linalg.lstsq(c.J, c.lo, rcond=None)[0]
        J = kin.stacked_ee_jacobian()
        hist.append((kin, J @ qdot, mem.v_prev.copy(), c))
        mem.update(J, qdot)
        q = q + model.state_rate_matrix(q) @ qdot * TS
    return q, hist


def test_static_push_settles_at_compliance(model):
    ref = current_ref(Kinematics(model, model.home_q()))
    params = AdmittanceParams()
    h = np.zeros(12)
    h[6] = 8.0  # +x push on the right EE

    def build(s, mem, kin, w):
        return admittance_constraint(model, s, mem, ref, w, params, kin)

    q, _ = closed_loop(model, build, 600, lambda t: h)
    err = -pose_error(Kinematics(model, q), ref.poses)
    assert err[6] == pytest.approx(0.010, abs=1e-5)
    assert np.all(np.abs(err[:6]) < 1e-6)


def test_discretization_consistency(model):
    # reconstruct a from consecutive twists and check the continuous-time law
    ref = current_ref(Kinematics(model, model.home_q()))
    params = AdmittanceParams()

    def wrench(t):
        h = np.zeros(12)
        h[1] = 5 * np.sin(3 * t)
        h[9] = 0.5
        return h

    def build(s, mem, kin, w):
        return admittance_constraint(model, s, mem, ref, w, params, kin)

    _, hist = closed_loop(model, build, 80, wrench)
    for k, (kin, v, v_prev, _) in enumerate(hist):
        a = (v - v_prev) / TS
        rho = pose_error(kin, ref.poses)
        res = params.km * (0 - a) + params.kd * (0 - v) + params.kp * rho + wrench(k * TS)
        assert np.max(np.abs(res)) < 1e-6


def test_hand_guiding_terminal_velocity(model):
    params = AdmittanceParams().compliant()
    h = np.zeros(12)
    h[6] = 25.3

    def build(s, mem, kin, w):
        return hand_guiding_constraint(model, s, mem, w, params, kin)

    _, hist = closed_loop(model, build, 500, lambda t: h)
    v = hist[-1][1]
    assert v[6] == pytest.approx(0.100, abs=1e-4)
    np.testing.assert_allclose(v[:6], 0, atol=1e-9)


def test_hand_guiding_release_decay(model):
    params = AdmittanceParams().compliant()

    def build(s, mem, kin, w):
        return hand_guiding_constraint(model, s, mem, w, params, kin)

    def wrench(t):
        h = np.zeros(12)
        h[6] = 25.3 if t < 1.0 else 0.0
        return h

    _, hist = closed_loop(model, build, 110, wrench)
    rate = 253 / 2253
    # after release v_k = Km/Ts / (Km/Ts + Kd) * v_{k-1}
    for k in range(101, 110):
        assert hist[k][1][6] == pytest.approx((1 - rate) * hist[k - 1][1][6], rel=1e-9)


def test_hand_guiding_at_rest(model):
    st0 = JointState(model.home_q(), np.zeros(model.n_u))
    c = hand_guiding_constraint(model, st0, ControllerMemory(TS), None, AdmittanceParams().compliant())
    np.testing.assert_array_equal(c.lo, 0.0)


def test_posture_examples(model):
    q = model.home_q()
    cols = model.input_columns("joints")
    off = model.base.state_size - model.n_b
    q_d = q[cols + off].copy()
    c = preferred_posture_constraint(model, q, q_d, np.zeros(16))
    np.testing.assert_array_equal(c.lo, 0.0)
    arm = list(cols).index(model.input_columns("left")[2])
    q_d[arm] += 0.1
    c = preferred_posture_constraint(model, q, q_d, np.zeros(16), K_JC)
    assert c.lo[arm] == pytest.approx(1.0)
    assert c.J.shape == (16, model.n_u)
    assert np.all(c.J[:, model.input_columns("base")] == 0)
    with pytest.raises(ValueError):
        preferred_posture_constraint(model, q, np.zeros(3), np.zeros(3))


def test_sinusoid_driver(model):
    q_d, qdot_d = sinusoid_posture_target(model, 25.0 / 4)
    torso = [0, 1]
    np.testing.assert_array_equal(q_d[torso], 0.0)
    np.testing.assert_allclose(q_d[2:], 3.0)
    np.testing.assert_allclose(qdot_d[2:], 0.75)
