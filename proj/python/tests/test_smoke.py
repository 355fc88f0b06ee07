import json
import math
import pathlib

import numpy as np
import pytest

import hptr

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "tests" / "fixtures"


def test_geometry():
    dx, dy, dth = hptr.relative_pose((0.0, 0.0, 0.0), (3.0, 4.0, math.pi / 2))
    assert (dx, dy) == pytest.approx((3.0, 4.0))
    assert dth == pytest.approx(math.pi / 2)
    assert hptr.wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_knn_brute_force():
    rng = np.random.default_rng(0)
    q = rng.uniform(-10, 10, size=(5, 3))
    t = rng.uniform(-10, 10, size=(12, 3))
    idx, ok = hptr.knn_indices(q, t, 4)
    assert idx.shape == (5, 4) and ok.all()
    d = np.hypot(q[:, None, 0] - t[None, :, 0], q[:, None, 1] - t[None, :, 1])
    np.testing.assert_array_equal(idx, np.argsort(d, axis=1, kind="stable")[:, :4])
    _, ok = hptr.knn_indices(q, t, 20)
    assert ok.sum(axis=1).tolist() == [12] * 5


def test_rpe_and_postprocessing():
    v = hptr.rpe((0, 0, 0), (0, 0, 0), dim=8)
    assert v.shape == (24,)
    np.testing.assert_allclose(v[1::2], 1.0)
    p = hptr.softmax_temperature([1.0, 0.0], 0.5)
    assert p == pytest.approx([0.8808, 0.1192], abs=1e-4)
    assert hptr.huber(0.5) == 0.125 and hptr.huber(2.0) == 1.5
    assert hptr.cos_loss(0.2, 0.2) == -1.0
    with pytest.raises(ArithmeticError):
        hptr.softmax_temperature([1.0], 0.0)


def test_scenario_io(tmp_path):
    s = hptr.Scenario.load(FIXTURES / "urban_small.json")
    assert (s.n_map, s.n_lights, s.n_agents, len(s.targets)) == (24, 3, 6, 5)
    path = tmp_path / "copy.json"
    s.save(path)
    assert hptr.Scenario.load(path).to_json() == s.to_json()
    broken = json.loads(s.to_json())
    del broken["meta"]
    with pytest.raises(hptr.ParseError, match="meta"):
        hptr.Scenario.from_json(json.dumps(broken))
    g = hptr.generate_scenario(seed=3, n_agents=4, t_f=4)
    assert g.to_json() == hptr.generate_scenario(seed=3, n_agents=4, t_f=4).to_json()


def test_predict_and_weights(tmp_path):
    s = hptr.Scenario.load(FIXTURES / "no_lights.json")
    m = hptr.Model("tiny", "diag_full", seed=1, t_f=s.t_f)
    out = m.predict(s)
    n = len(s.targets)
    assert out["confidence"].shape == (n, 6)
    assert out["traj_global"].shape == (n, 6, s.t_f, 9)
    np.testing.assert_allclose(out["confidence"].sum(axis=1), 1.0)
    assert np.isfinite(out["traj_local"]).all()
    assert math.isfinite(m.loss(s))
    assert m.evaluate(s)["agents"] == n

    w = tmp_path / "w.bin"
    m.save_weights(w)
    back = hptr.Model.load(m.config_json, w)
    np.testing.assert_allclose(back.predict(s)["traj_local"], out["traj_local"], atol=1e-5)
    w.write_bytes(w.read_bytes()[:-3])
    with pytest.raises(hptr.CorruptionError):
        hptr.Model.load(m.config_json, w)


def test_flops_ordering():
    s = hptr.Scenario.load(FIXTURES / "urban_small.json")
    lower = hptr.Model("default", "lower_tri", t_f=s.t_f).analytic_flops(s)
    both = hptr.Model("default", "diag_full", t_f=s.t_f).analytic_flops(s)
    assert lower < both


def test_session_matches_predict():
    s = hptr.generate_scenario(seed=5, n_lanes=12, n_agents=5, n_lights=2, t_f=4)
    m = hptr.Model("tiny", seed=2)
    sess = hptr.Session(m, s)
    first = sess.step(s)
    second = sess.step(s)
    assert first["stages"] == "TL+AG+AC" and second["stages"] == "AG+AC"
    s.set_light_state(0, 4)
    assert sess.step(s)["stages"] == "TL+AG+AC"
    np.testing.assert_allclose(sess.step(s)["traj_local"], m.predict(s)["traj_local"], atol=1e-12)


def test_toy_train_decreases():
    curve = hptr.toy_train(epochs=10, scenarios=8)
    assert len(curve) == 10
    assert curve[-1]["total"] < curve[0]["total"]
