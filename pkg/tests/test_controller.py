import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cctmpc.controller import (
    InfeasibleState,
    InterpolationInfeasible,
    TubeMPC,
    lyapunov_value,
    rotated_cost,
    shifted_warm_start,
    terminal_M,
    vertex_feedback,
)
from cctmpc.synthesis import f_membership_block


@pytest.fixture(scope="module")
def ctrl1(ex1):
    return TubeMPC(ex1.model, ex1.cost, ex1.synth, ex1.spec.horizon)


@pytest.fixture(scope="module")
def sol1(ctrl1):
    return ctrl1.step([4.0, 8.0])


def test_example1_problem_size(ex1, ctrl1):
    m, k, N = 16, 16, 50
    assert ctrl1.layout.n == (N + 1) * m + N * k + 1 + k
    dyn = ex1.model.mbar * ex1.system.l * m
    assert dyn == 256
    # Dynamics rows of every stage: 50 stages of 256.
    start, stop = ctrl1.block.sections["dynamics"]
    assert N * (stop - start) == 12800


def test_step_from_reference_state_is_feasible(ctrl1, sol1):
    assert sol1.y.shape == (51, 16) and sol1.u.shape == (50, 16, 1)
    assert 0.0 <= sol1.alpha <= 1.0
    assert ctrl1.violation(sol1.z, [4.0, 8.0]) <= 1e-7
    assert sol1.lyapunov > 0


def test_far_state_is_infeasible(ctrl1):
    with pytest.raises(InfeasibleState):
        ctrl1.step([100.0, 100.0])


def test_lyapunov_matches_stagewise_evaluation(ex1, sol1):
    """The QP value equals the rotated stage costs along its tube plus the terminal cost."""
    b = ex1
    L = lyapunov_value(b.model, b.cost, b.synth, sol1.y)
    assert L == pytest.approx(sol1.lyapunov, rel=1e-6, abs=1e-6)


def test_vertex_feedback_properties(ex1, sol1):
    model = ex1.model
    x = np.array([4.0, 8.0])
    fb = vertex_feedback(model, x, sol1.y[0], sol1.u[0])
    assert np.all(fb.theta >= 0) and fb.theta.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(model.vertices(sol1.y[0]).T @ fb.theta, x, atol=1e-7)
    np.testing.assert_allclose(fb.u, sol1.u[0].T @ fb.theta, atol=1e-12)
    assert ex1.system.U.contains(fb.u, tol=1e-7)


def test_vertex_feedback_at_vertices_returns_vertex_input(ex1):
    s = ex1.synth
    X = ex1.model.vertices(s.sigma)
    for i, x in enumerate(X):
        fb = vertex_feedback(ex1.model, x, s.sigma, s.u_sigma)
        np.testing.assert_allclose(fb.u, s.u_sigma[i], atol=1e-6)


def test_vertex_feedback_outside_raises(ex1):
    s = ex1.synth
    with pytest.raises(InterpolationInfeasible):
        vertex_feedback(ex1.model, 10 * ex1.model.vertices(s.sigma)[0], s.sigma, s.u_sigma)


@pytest.mark.parametrize("name", ["ex1", "ex2", "ex3"])
def test_terminal_cost_vanishes_at_steady(name, request):
    b = request.getfixturevalue(name)
    assert abs(terminal_M(b.model, b.cost, b.synth, b.synth.y_s).value) <= 1e-9


def test_terminal_cost_at_sigma_matches_scalar_search(ex1):
    """Oracle: bounded scalar minimization over the segment coordinate of separate rotated-cost QPs."""
    b = ex1
    s = b.synth
    block = f_membership_block(b.model, next_state=True)

    def f(a):
        r, _ = rotated_cost(b.model, b.cost, s, s.sigma, s.y_s + a * s.direction, block=block)
        return r + s.rho * a / (1 - s.gamma)

    # The feasible coordinates form an interval ending at 1; locate its left end by bisection.
    lo, hi = 0.0, 1.0
    assert np.isfinite(f(hi))
    if not np.isfinite(f(lo)):
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            lo, hi = (lo, mid) if np.isfinite(f(mid)) else (mid, hi)
    left = hi
    best = minimize_scalar(f, bounds=(left, 1.0), method="bounded", options={"xatol": 1e-10})
    oracle = min(best.fun, f(left), f(1.0))
    M = terminal_M(b.model, b.cost, s, s.sigma)
    assert M.value == pytest.approx(oracle, rel=1e-6)
    assert M.value <= f(1.0) + 1e-9


def test_terminal_cost_infinite_outside_cone(ex1):
    s = ex1.synth
    y = s.sigma.copy()
    y[0] += 100.0
    assert np.max(ex1.model.E @ y) > 0
    assert terminal_M(ex1.model, ex1.cost, s, y).value == np.inf


@pytest.mark.parametrize("name", ["ex1", "ex3"])
def test_steady_sequence_has_zero_lyapunov(name, request):
    b = request.getfixturevalue(name)
    ys = np.tile(b.synth.y_s, (5, 1))
    assert abs(lyapunov_value(b.model, b.cost, b.synth, ys)) <= 1e-8 * (1 + b.synth.V_s)


def test_shifted_warm_start_is_feasible_and_not_better(ex1, ctrl1, sol1):
    fb = vertex_feedback(ex1.model, [4.0, 8.0], sol1.y[0], sol1.u[0])
    sys = ex1.system
    x_next = sys.A_vertices[0] @ np.array([4.0, 8.0]) + sys.B_vertices[0] @ fb.u + sys.C @ np.array([0.3, -1.0])
    z = shifted_warm_start(ctrl1, sol1)
    assert ctrl1.violation(z, x_next) <= 1e-7
    nxt = ctrl1.step(x_next)
    assert nxt.objective <= ctrl1.objective(z) + 1e-6
    # The shifted candidate already certifies descent by at least the first rotated stage.
    r0, _ = rotated_cost(ex1.model, ex1.cost, ex1.synth, sol1.y[0], sol1.y[1])
    assert ctrl1.objective(z) - ctrl1.N * ex1.synth.V_s <= sol1.lyapunov - r0 + 1e-6


def test_hessian_is_psd(ex1):
    ctrl = TubeMPC(ex1.model, ex1.cost, ex1.synth, 4)
    H = ctrl.H_true.toarray()
    np.testing.assert_allclose(H, H.T, atol=0)
    assert np.linalg.eigvalsh(H).min() >= -1e-9 * np.abs(H).max()


def test_example3_step_reaches_steady_tube(ex3):
    ctrl = TubeMPC(ex3.model, ex3.cost, ex3.synth, ex3.spec.horizon)
    x0 = np.array([3.0, -2.0, 1.0, 0.5])
    sol = ctrl.step(x0)
    assert ctrl.violation(sol.z, x0) <= 1e-7
    np.testing.assert_allclose(sol.y[-1], ex3.synth.y_s, atol=1e-6)


def test_horizon_must_be_positive(ex1):
    with pytest.raises(ValueError):
        TubeMPC(ex1.model, ex1.cost, ex1.synth, 0)
