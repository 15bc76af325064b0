import numpy as np
import pytest

from hqp_harvest.model import default_model_path, load_model
from hqp_harvest.sim import (
    ScenarioAbort,
    ScenarioError,
    WrenchProfile,
    WrenchSegment,
    initial_safety_report,
    integrate,
    load_scenario,
    run_scenario,
    sample_wrench,
    scenario_from_dict,
    shipped_scenarios,
    write_csv,
)


@pytest.fixture(scope="module")
def model():
    return load_model(default_model_path())


def short(**over):
    doc = {"name": "short", "sim": {"duration_s": 0.5, "Ts": 0.01, "seed": 3}, "hierarchy": {"operational": "admittance"}}
    for k, v in over.items():
        doc.setdefault(k, {})
        doc[k].update(v) if isinstance(v, dict) else doc.__setitem__(k, v)
    return doc


# integrate


def test_integrate_rest(model):
    q = model.home_q()
    np.testing.assert_array_equal(integrate(q, np.zeros(model.n_u), 0.01, model), q)


def test_integrate_single_joint(model):
    q = model.home_q()
    qdot = np.zeros(model.n_u)
    c = model.input_columns("right")[0]
    qdot[c] = 1.0
    q1 = integrate(q, qdot, 0.01, model)
    off = model.base.state_size - model.n_b
    assert q1[c + off] - q[c + off] == pytest.approx(0.01)
    assert np.count_nonzero(q1 - q) == 1


def test_integrate_unicycle_step(model):
    q = model.home_q()
    qdot = np.zeros(model.n_u)
    qdot[0] = 1.0  # forward speed at theta = 0
    q1 = integrate(q, qdot, 0.01, model)
    assert q1[0] == pytest.approx(0.01)
    assert q1[1] == 0.0


# sample_wrench


def prof(*segs):
    return WrenchProfile(tuple(segs))


def test_wrench_outside_segments_is_zero():
    p = prof(WrenchSegment(1.0, 2.0, np.r_[8.0, 0, 0, 0, 0, 0]))
    w = sample_wrench(p, 0.5)
    assert np.all(w.as_vector() == 0)
    assert np.all(sample_wrench(p, 2.0).as_vector() == 0)  # end is exclusive


def test_world_segment_ignores_orientation():
    p = prof(WrenchSegment(0.0, 1.0, np.r_[8.0, 0, 0, 0, 0, 0]))
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_array_equal(sample_wrench(p, 0.5, R_tool=R).f, [8.0, 0, 0])


def test_tool_segment_is_rotated():
    p = prof(WrenchSegment(0.0, 1.0, np.r_[8.0, 0, 0, 0, 0, 1.0], "tool"))
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    w = sample_wrench(p, 0.5, R_tool=R)
    np.testing.assert_allclose(w.f, [0, 8.0, 0], atol=1e-15)
    np.testing.assert_allclose(w.mu, [0, 0, 1.0], atol=1e-15)


def test_noise_is_bounded():
    p = prof(WrenchSegment(0.0, 10.0, np.r_[8.0, 0, 0, 0, 0, 0]))
    rng = np.random.default_rng(0)
    fs = np.array([sample_wrench(p, 1.0, rng, (0.5, 0.05)).as_vector() for _ in range(2000)])
    assert np.all(np.abs(fs[:, :3] - [8.0, 0, 0]) <= 0.5)
    assert np.all(np.abs(fs[:, 3:]) <= 0.05)
    assert abs(fs[:, 0].mean() - 8.0) < 0.05


def test_toward_keeps_magnitude_and_aims():
    p = prof(WrenchSegment(0.0, 1.0, np.r_[20.0, 0, 0, 0, 0, 0], toward=np.array([1.0, 1.0, 0.0])))
    w = sample_wrench(p, 0.5, p_ee=np.zeros(3))
    np.testing.assert_allclose(w.f, 20.0 * np.array([1, 1, 0]) / np.sqrt(2))


def test_overlapping_segments_rejected():
    with pytest.raises(ValueError):
        prof(WrenchSegment(0.0, 2.0, np.zeros(6)), WrenchSegment(1.0, 3.0, np.zeros(6)))


# loading


def test_shipped_scenarios_load():
    names = shipped_scenarios()
    for n in ("sinusoid_safety", "handguide_walls", "harvest_semi_auto", "harvest_auto"):
        assert n in names
    for n in names:
        rows, bad = initial_safety_report(load_scenario(n))
        assert rows == 86 and not bad, (n, bad)


@pytest.mark.parametrize(
    "patch, msg",
    [
        ({"bogus": {}}, "bogus"),
        ({"sim": {"Ts": 0.0}}, "Ts"),
        ({"sim": {"duration_s": -1.0}}, "duration"),
        ({"sim": {"initial_q": [0.0] * 5}}, "initial_q"),
        ({"wrench_profiles": {"right": [{"t_start": 1.0, "t_end": 2.0, "toward": "nowhere", "magnitude": 5.0}]}}, "nowhere"),
        ({"wrench_profiles": {"right": [{"t_start": 1.0, "t_end": 2.0, "toward": [0, 0, 1], "force": [1, 0, 0]}]}}, "magnitude"),
        ({"hierarchy": {"operational": "dance"}}, "operational"),
    ],
)
def test_bad_scenarios_rejected(patch, msg):
    with pytest.raises(ScenarioError, match=msg):
        scenario_from_dict(short(**patch))


def test_initial_q_outside_limits_names_joint(model):
    q = model.home_q()
    q[3] = 5.0  # torso_1
    with pytest.raises(ScenarioError, match="torso_1"):
        scenario_from_dict(short(sim={"initial_q": q.tolist()}))


def test_yaml_parse_error_has_location(tmp_path):
    f = tmp_path / "bad.yaml"
    f.write_text("sim: {duration_s: 1\nsafety: [\n")
    with pytest.raises(ScenarioError, match="line"):
        load_scenario(f)


# running


def test_quiescence():
    res = run_scenario(scenario_from_dict(short(sim={"duration_s": 1.0})))
    qd = res.array("qdot")
    assert np.abs(qd).max() < 1e-6
    assert len(res.records) == 100


def test_determinism_apart_from_timing(tmp_path):
    doc = short(sim={"noise": {"force_N": 0.5, "moment_Nm": 0.05}}, wrench_profiles={"right": [{"t_start": 0.1, "t_end": 0.4, "force": [8, 0, 0]}]})
    a = run_scenario(scenario_from_dict(doc))
    b = run_scenario(scenario_from_dict(doc))
    for f in ("q", "qdot", "wrench_raw", "h"):
        np.testing.assert_array_equal(a.array(f), b.array(f))
    c = run_scenario(scenario_from_dict(doc, seed=4))
    assert not np.array_equal(a.array("wrench_raw"), c.array("wrench_raw"))
    assert a.events[0][3] == "seed=3"


def test_push_is_followed_and_safety_holds():
    doc = short(sim={"duration_s": 1.0}, wrench_profiles={"right": [{"t_start": 0.0, "t_end": 1.0, "force": [8, 0, 0]}]})
    res = run_scenario(scenario_from_dict(doc))
    pose = res.array("ee_pose")
    assert pose[-1, 1, 0] - pose[0, 1, 0] > 1e-3
    assert res.array("h").min() >= -1e-3


def test_csv_layout(tmp_path):
    res = run_scenario(scenario_from_dict(short(sim={"duration_s": 0.05})))
    main, ev = write_csv(res, tmp_path)
    lines = main.read_text().splitlines()
    header = lines[0].split(",")
    assert header == res.columns and header[0] == "t"
    assert len(lines) == 1 + len(res.records)
    assert sum(c.startswith("h:") for c in header) == res.array("h").shape[1]
    assert ev.read_text().splitlines()[0] == "t,phase,mode,event"


def test_contradictory_hard_boxes_abort():
    boxes = [{"columns": "right", "lo": 0.1, "hi": 0.2}, {"columns": "right", "lo": -0.2, "hi": -0.1}]
    with pytest.raises(ScenarioAbort) as err:
        run_scenario(scenario_from_dict(short(hierarchy={"hard_boxes": boxes})))
    assert err.value.tick == 0
    assert "hard_box" in str(err.value)


def test_next_phase_waits_for_the_arm():
    from hqp_harvest.sim import ARRIVAL_TOL
    from hqp_harvest.traj import harvest_waypoints

    cfg = scenario_from_dict({**_doc("harvest_auto"), "sim": {**_doc("harvest_auto")["sim"], "duration_s": 4.5}})
    res = run_scenario(cfg)
    t_grasp = next(e[0] for e in res.events if e[3] == "enter Grasp")
    before = np.array([r.t <= t_grasp + 1e-9 for r in res.records])
    ped = cfg.perception["head"].outcome.best("peduncle")
    pre = harvest_waypoints(ped, cfg.harvest.box, cfg.harvest.plan)[0]
    assert np.linalg.norm(res.array("ee_pose")[before, 1, :3] - pre.p, axis=1).min() <= ARRIVAL_TOL


def _doc(name):
    import yaml
    from importlib.resources import files

    return yaml.safe_load(files("hqp_harvest").joinpath(f"data/scenarios/{name}.yaml").read_text())
