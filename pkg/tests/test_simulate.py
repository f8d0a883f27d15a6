import io

import numpy as np
import pytest

from cctmpc.controller import InfeasibleState, TubeMPC
from cctmpc.simulate import (
    ScenarioConfig,
    lyapunov_is_descending,
    ordered_outline,
    polyline_rows,
    realize,
    run_closed_loop,
    sample_uncertainty,
    UncertaintySampler,
    write_csv,
)
from cctmpc.synthesis import TubeModel, synthesize
from cctmpc.cost import stage_cost_form
from cctmpc.system import Polyhedron, UncertainSystem
from cctmpc.geometry import build_template_2d, regular_polygon_angles
from oracles import optimal_law_example3


def two_model_system(W):
    A = np.stack([np.array([[1.0, 0.1], [0.0, 1.0]]), np.array([[1.0, 0.2], [0.0, 1.0]])])
    B = np.stack([np.array([[0.0], [0.1]])] * 2)
    return UncertainSystem(A, B, np.eye(2), W, Polyhedron.whole_space(2), Polyhedron.box([-1], [1]))


@pytest.mark.parametrize("disturbance", ["box-uniform", "vertex-extreme"])
@pytest.mark.parametrize("model", ["fixed-vertex", "dirichlet-mix"])
def test_sampler_is_deterministic(disturbance, model):
    sys = two_model_system(Polyhedron.box([-1, -2], [1, 2]))
    cfg = ScenarioConfig(7, 10, (0, 0), disturbance, model)
    a, b = UncertaintySampler(sys, cfg), UncertaintySampler(sys, cfg)
    for _ in range(50):
        (wa, pa), (wb, pb) = a.draw(), b.draw()
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(pa, pb)


def test_sampling_modes_respect_their_sets():
    sys = two_model_system(Polyhedron.box([-1, -2], [1, 2]))
    for model in ("fixed-vertex", "dirichlet-mix"):
        s = UncertaintySampler(sys, ScenarioConfig(1, 1, (0, 0), "vertex-extreme", model))
        for _ in range(100):
            w, p = s.draw()
            assert set(np.abs(w)) <= {1.0, 2.0} and np.all(np.abs(w) == [1, 2])
            assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
            if model == "fixed-vertex":
                assert sorted(p) == [0.0, 1.0]
    s = UncertaintySampler(sys, ScenarioConfig(1, 1, (0, 0)))
    W = np.array([s.draw()[0] for _ in range(2000)])
    assert np.all(np.abs(W) <= [1, 2]) and np.all(W.std(axis=0) > [0.5, 1.0])


def test_non_box_disturbance_rejection_sampling():
    W = Polyhedron([[1, 1], [1, -1], [-1, 1], [-1, -1]], [1, 1, 1, 1])
    sys = two_model_system(W)
    s = UncertaintySampler(sys, ScenarioConfig(3, 1, (0, 0)))
    for _ in range(200):
        assert W.contains(s.draw()[0])
    vs = UncertaintySampler(sys, ScenarioConfig(3, 1, (0, 0), "vertex-extreme"))
    for _ in range(20):
        w = vs.draw()[0]
        assert np.abs(w).sum() == pytest.approx(1.0) and np.max(np.abs(w)) == pytest.approx(1.0)


def test_zero_disturbance_and_single_model():
    sys = UncertainSystem.lti(np.eye(2), np.ones((2, 1)), np.eye(2), Polyhedron.box([0, 0], [0, 0]),
                              Polyhedron.whole_space(2), Polyhedron.box([-1], [1]))
    rng = np.random.default_rng(0)
    for mode in ("box-uniform", "vertex-extreme"):
        w, p = sample_uncertainty(sys, ScenarioConfig(0, 1, (0, 0), mode, "dirichlet-mix"), rng)
        np.testing.assert_array_equal(w, 0.0)
        np.testing.assert_array_equal(p, [1.0])


def test_realize_mixes_vertices():
    sys = two_model_system(Polyhedron.box([0, 0], [0, 0]))
    A, B = realize(sys, [0.25, 0.75])
    assert A[0, 1] == pytest.approx(0.175)
    np.testing.assert_array_equal(B, sys.B_vertices[0])


@pytest.mark.parametrize("kwargs", [dict(seed=-1), dict(steps=0), dict(disturbance="gauss"), dict(model="x")])
def test_scenario_validation(kwargs):
    base = dict(seed=0, steps=3, x0=(0.0, 0.0))
    base.update(kwargs)
    with pytest.raises(ValueError):
        ScenarioConfig(**base)


def test_closed_loop_logs_are_bit_identical(ex1):
    cfg = ScenarioConfig(5, 4, (4.0, 8.0), "box-uniform", "fixed-vertex")
    runs = [run_closed_loop(TubeMPC(ex1.model, ex1.cost, ex1.synth, 10), ex1.system, cfg) for _ in range(2)]
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.w, b.w)
        assert a.lyapunov == b.lyapunov
    ta, tb = io.StringIO(), io.StringIO()
    write_csv(runs[0], ta)
    write_csv(runs[1], tb)
    assert ta.getvalue() == tb.getvalue()


def test_zero_disturbance_stays_in_steady_tube():
    sys = UncertainSystem.lti(np.array([[1.0, 0.2], [-0.2, 0.8]]), np.array([[0.0], [0.2]]), np.eye(2),
                              Polyhedron.box([0, 0], [0, 0]), Polyhedron.box([-10, -10], [10, 10]),
                              Polyhedron.box([-3], [3]))
    t, vc = build_template_2d(regular_polygon_angles(8))
    model = TubeModel.build(t, vc, sys)
    cost = stage_cost_form(1, 1, 1, 0.01, vc, 1)
    synth = synthesize(model, cost, 0.9)
    np.testing.assert_allclose(synth.y_s, 0.0, atol=1e-6)
    ctrl = TubeMPC(model, cost, synth, 5)
    logs = run_closed_loop(ctrl, sys, ScenarioConfig(0, 15, (1.0, -0.5)))
    assert lyapunov_is_descending(logs)
    assert np.linalg.norm(logs[-1].x) < np.linalg.norm(logs[0].x)
    assert all(log.residual <= 1e-7 for log in logs)


def test_example3_settled_input_is_optimal_law(ex3):
    ctrl = TubeMPC(ex3.model, ex3.cost, ex3.synth, ex3.spec.horizon)
    cfg = ScenarioConfig(2, 20, (3.0, -2.0, 1.0, 0.5), "vertex-extreme")
    logs = run_closed_loop(ctrl, ex3.system, cfg)
    settled = [log for log in logs if np.max(np.abs(log.y0 - ex3.synth.y_s)) <= 1e-6]
    assert len(settled) >= 10
    for log in settled:
        assert log.u[0] == pytest.approx(optimal_law_example3(log.x), abs=1e-6)
        assert np.all(np.abs(log.w) == 1.0)


def test_infeasible_initial_state_raises(ex1):
    with pytest.raises(InfeasibleState):
        run_closed_loop(TubeMPC(ex1.model, ex1.cost, ex1.synth, 5), ex1.system,
                        ScenarioConfig(0, 3, (100.0, 100.0)))


def test_csv_layout(ex3):
    logs = run_closed_loop(TubeMPC(ex3.model, ex3.cost, ex3.synth, 3), ex3.system,
                           ScenarioConfig(0, 3, (1.0, 0.0, 0.0, 0.0)))
    buf = io.StringIO()
    write_csv(logs, buf)
    lines = buf.getvalue().split("\n")
    assert lines[0] == "k,x0,x1,x2,x3,u0,w0,lyapunov,residual"
    assert len(lines) == 5 and lines[-1] == ""
    row = lines[1].split(",")
    assert row[0] == "0" and float(row[1]) == 1.0
    assert [float(v) for v in row[1:5]] == list(logs[0].x)


def test_outline_is_counter_clockwise_and_closed():
    rng = np.random.default_rng(4)
    ang = np.sort(rng.uniform(0, 2 * np.pi, 9))
    pts = np.c_[np.cos(ang), np.sin(ang)]
    shuffled = np.vstack([pts[rng.permutation(9)], pts[:2]])      # with duplicates
    out = ordered_outline(shuffled)
    assert out.shape == (10, 2)
    np.testing.assert_array_equal(out[0], out[-1])
    # Shoelace area is positive for counter-clockwise order.
    x, y = out[:, 0], out[:, 1]
    assert 0.5 * np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]) > 0
    a = np.diff(out, axis=0)
    b = np.roll(a, -1, axis=0)
    assert np.min(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) > 0


def test_polyline_rows():
    rows = polyline_rows("steady", 3, [[1, 0], [0, 1], [-1, 0], [0, -1]])
    assert len(rows) == 5 and rows[0][:3] == ["steady", 3, 0] and rows[0][3:] == rows[-1][3:]
    assert len(polyline_rows("p", 0, np.eye(3))) == 3


def test_lyapunov_descent_helper():
    class L:
        def __init__(self, v):
            self.lyapunov = v
    assert lyapunov_is_descending([L(v) for v in (5, 3, 1, 1e-7, 1e-7)])
    assert not lyapunov_is_descending([L(v) for v in (5, 3, 3)])
    assert not lyapunov_is_descending([L(v) for v in (5, 6)])
