import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from hqp_harvest.model import (
    JointState,
    Kinematics,
    ModelParseError,
    ModelValidationError,
    base_velocity_mapping,
    default_model_path,
    forward_kinematics,
    geometric_jacobian,
    load_model,
    point_jacobian,
    single_joint_model,
    stacked_dual_arm_jacobian,
)
from hqp_harvest.rotations import quat_multiply, quat_to_matrix
from oracles import central_difference


@pytest.fixture(scope="module")
def model():
    return load_model(default_model_path())


def random_state(model, rng):
    lo = np.where(np.isfinite(model.pos_lower), model.pos_lower, -2.0)
    hi = np.where(np.isfinite(model.pos_upper), model.pos_upper, 2.0)
    return rng.uniform(lo, hi)


def test_default_model_sizes(model):
    assert model.n_dof == 18
    assert model.n_u == 18
    assert model.state_size == 19
    assert (model.n_b, model.n_t, model.n_a) == (2, 2, 7)


def test_default_model_table_limits(model):
    arm_hi = [1.44, 1.47, 2.41, 1.49, 2.42, 2.03, 1.28]
    np.testing.assert_array_equal(model.pos_upper[model.state_columns("left")], arm_hi)
    np.testing.assert_array_equal(model.pos_upper[model.state_columns("right")], arm_hi)
    np.testing.assert_array_equal(model.vel_upper[model.input_columns("left")], 1.95)
    np.testing.assert_array_equal(model.pos_upper[model.state_columns("torso")], [3.0, 0.3])


def write(tmp_path, doc):
    p = tmp_path / "m.yaml"
    p.write_text(yaml.safe_dump(doc))
    return p


def single_doc(lower=-np.pi, upper=np.pi, axis=(0, 0, 1)):
    return {
        "joints": [
            {"name": "base", "kind": "planar-base"},
            {"name": "j1", "kind": "revolute", "axis": list(axis), "parent": "base"},
        ],
        "frames": [{"name": "tip", "parent": "j1", "xyz": [1, 0, 0]}],
        "limits": {
            "pos_lower": [-1e9, -1e9, -3.0, float(lower)],
            "pos_upper": [1e9, 1e9, 3.0, float(upper)],
            "vel_lower": [-1, -1, -1],
            "vel_upper": [1, 1, 1],
        },
        "partition": {"n_b": 2, "n_t": 1, "n_a": 0},
    }


def test_load_single_joint_file(tmp_path):
    m = load_model(write(tmp_path, single_doc()))
    assert len(m.joints) - 1 == 1
    assert m.pos_upper[-1] == pytest.approx(np.pi)


def test_inverted_limits_rejected(tmp_path):
    with pytest.raises(ModelValidationError):
        load_model(write(tmp_path, single_doc(lower=1.0, upper=0.5)))


def test_non_unit_axis_rejected(tmp_path):
    with pytest.raises(ModelValidationError):
        load_model(write(tmp_path, single_doc(axis=(0, 0, 2))))


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("joints: [ {name: a\n")
    with pytest.raises(ModelParseError):
        load_model(p)
    p.write_text("frames: []\n")
    with pytest.raises(ModelParseError):
        load_model(p)


def test_bad_partition(tmp_path):
    doc = single_doc()
    doc["partition"] = {"n_b": 2, "n_t": 2, "n_a": 0}
    with pytest.raises(ModelValidationError):
        load_model(write(tmp_path, doc))


def test_home_pose_golden(model):
    # composition of the fixed offsets at q = 0, worked out by hand in the model file header
    st0 = JointState(np.zeros(model.state_size))
    left = forward_kinematics(model, st0, "left_ee")
    right = forward_kinematics(model, st0, "right_ee")
    np.testing.assert_allclose(left.p, [0.78, 0.30, 1.05], atol=1e-12)
    np.testing.assert_allclose(right.p, [0.78, -0.30, 1.05], atol=1e-12)
    np.testing.assert_allclose(left.o, [1, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(forward_kinematics(model, st0, "head").p, [0, 0, 1.50], atol=1e-12)


def test_prismatic_axis_translation():
    m = single_joint_model("prismatic", axis=(0, 0, 1), child_offset=(0, 0, 0))
    pose = forward_kinematics(m, JointState(np.array([0, 0, 0, 0.5])), "tip")
    np.testing.assert_allclose(pose.p, [0, 0, 0.5], atol=1e-15)


def test_revolute_planar_rotation():
    m = single_joint_model("revolute", axis=(0, 0, 1), child_offset=(1, 0, 0))
    pose = forward_kinematics(m, JointState(np.array([0, 0, 0, np.pi / 2])), "tip")
    np.testing.assert_allclose(pose.p, [0, 1, 0], atol=1e-15)


def test_unknown_frame(model):
    with pytest.raises(KeyError):
        forward_kinematics(model, JointState(model.home_q()), "nope")
    with pytest.raises(KeyError):
        geometric_jacobian(model, JointState(model.home_q()), "nope")


@pytest.mark.parametrize(
    "theta, vw, expected",
    [(0.0, (1, 0), (1, 0, 0)), (np.pi / 2, (1, 0), (0, 1, 0)), (0.7, (0, 1), (0, 0, 1))],
)
def test_base_velocity_mapping(theta, vw, expected):
    np.testing.assert_allclose(base_velocity_mapping(theta) @ np.array(vw), expected, atol=1e-15)


def test_single_revolute_jacobian_column():
    m = single_joint_model("revolute", axis=(0, 0, 1), child_offset=(1, 0, 0))
    J = geometric_jacobian(m, JointState(np.zeros(4)), "tip")
    np.testing.assert_allclose(J[:3, 2], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(J[3:, 2], [0, 0, 1], atol=1e-15)


def test_left_jacobian_ignores_right_arm(model):
    J = geometric_jacobian(model, JointState(np.zeros(model.state_size)), "left_ee")
    assert np.all(J[:, model.input_columns("right")] == 0.0)


def _fd_frame_jacobian(model, q, frame):
    """Finite differences through the state-rate map, angular part from quaternion rates."""
    M = model.state_rate_matrix(q)
    kin = Kinematics(model, q)
    R0 = kin.pose(frame).rotation

    def pos(dq):
        return Kinematics(model, q + M @ dq).pose(frame).p

    def rotvec(dq):
        R = Kinematics(model, q + M @ dq).pose(frame).rotation
        S = R @ R0.T
        return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])

    zero = np.zeros(model.n_u)
    return np.vstack([central_difference(pos, zero), central_difference(rotvec, zero)])


def _rel_err(A, B):
    return np.max(np.abs(A - B)) / max(1.0, np.max(np.abs(B)))


def test_jacobians_match_finite_differences(model):
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = random_state(model, rng)
        kin = Kinematics(model, q)
        for frame in ("left_ee", "right_ee", "head"):
            assert _rel_err(kin.jacobian(frame), _fd_frame_jacobian(model, q, frame)) < 1e-5
        M = model.state_rate_matrix(q)
        for pname in ("left_elbow", "right_forearm"):
            fd = central_difference(lambda dq: Kinematics(model, q + M @ dq).point_position(pname), np.zeros(model.n_u))
            assert _rel_err(kin.point_jacobian(pname), fd) < 1e-5


def test_point_jacobian_definitions(model):
    rng = np.random.default_rng(1)
    st1 = JointState(random_state(model, rng))
    Jp = point_jacobian(model, st1, ("right_ee", np.zeros(3)))
    np.testing.assert_array_equal(Jp, geometric_jacobian(model, st1, "right_ee")[:3])
    assert np.all(point_jacobian(model, st1, ("world", [1.0, 2.0, 3.0])) == 0.0)


def test_stacked_jacobian_blocks(model):
    rng = np.random.default_rng(2)
    for _ in range(100):
        st1 = JointState(random_state(model, rng))
        J = stacked_dual_arm_jacobian(model, st1)
        assert J.shape == (12, model.n_u)
        np.testing.assert_array_equal(J[:6], geometric_jacobian(model, st1, "left_ee"))
        assert np.all(J[:6, model.input_columns("right")] == 0.0)
        assert np.all(J[6:, model.input_columns("left")] == 0.0)
        assert np.linalg.matrix_rank(J) <= min(12, model.n_u)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=19, max_size=19))
def test_quaternion_outputs_unit_norm(qs):
    model = load_model(default_model_path())
    q = np.clip(np.array(qs), np.maximum(model.pos_lower, -3), np.minimum(model.pos_upper, 3))
    for frame in ("left_ee", "right_ee", "head", "left_sensor"):
        o = Kinematics(model, q).pose(frame).o
        assert abs(np.linalg.norm(o) - 1.0) < 1e-9
        assert o[0] >= 0.0
        np.testing.assert_allclose(quat_to_matrix(o), Kinematics(model, q).frame_transform(frame)[0], atol=1e-9)


def test_quat_multiply_identity():
    q = np.array([0.5, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(quat_multiply(q, [1, 0, 0, 0]), q)
