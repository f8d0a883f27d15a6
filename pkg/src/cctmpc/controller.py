"""Online tube MPC: one convex QP per step plus a vertex-interpolating feedback.

The horizon problem optimizes tube parameters ``y_0..y_N``, vertex inputs
``u_0..u_{N-1}``, a terminal segment coordinate ``alpha`` and terminal vertex
inputs ``u_term``.  The terminal cost is expressed through its epigraph so the
whole problem stays a single QP.  Its objective equals the Lyapunov function
of the closed loop plus the constant ``N V_s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cost import StageCost
from .solver import (
    LinearProgram,
    QuadraticProgram,
    SolveResult,
    SolverError,
    SolverSettings,
    Status,
    solve_lp,
    solve_qp,
)
from .synthesis import (
    FMembershipBlock,
    SynthesisData,
    TubeModel,
    cost_to_travel,
    f_membership_block,
    membership_tol,
)

TIKHONOV = 1e-8


class InfeasibleState(RuntimeError):
    """The measured state lies outside the controller's feasible domain."""


class InterpolationInfeasible(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TubeSolution:
    y: np.ndarray              # (N+1, m)
    u: np.ndarray              # (N, mbar, nu)
    alpha: float
    u_term: np.ndarray         # (mbar, nu)
    objective: float           # without the Tikhonov term
    lyapunov: float            # objective - N V_s
    z: np.ndarray
    result: SolveResult | None = None

    @property
    def horizon(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True, eq=False)
class FeedbackResult:
    theta: np.ndarray
    u: np.ndarray
    residual: float


class _Layout:
    def __init__(self, m: int, k: int, N: int):
        self.m, self.k, self.N = m, k, N
        self.y0 = 0
        self.u0 = (N + 1) * m
        self.alpha = self.u0 + N * k
        self.uterm = self.alpha + 1
        self.n = self.uterm + k

    def y(self, i: int) -> slice:
        return slice(self.y0 + i * self.m, self.y0 + (i + 1) * self.m)

    def u(self, i: int) -> slice:
        return slice(self.u0 + i * self.k, self.u0 + (i + 1) * self.k)


class TubeMPC:
    """Horizon-``N`` tube controller over fixed offline data.

    The QP matrices are assembled once; each step only rewrites the rows
    that bound ``Y x <= y_0``.
    """

    def __init__(self, model: TubeModel, cost: StageCost, synth: SynthesisData, horizon: int,
                 settings: SolverSettings | None = None, tikhonov: float = TIKHONOV):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.model = model
        self.cost = cost
        self.synth = synth
        self.N = horizon
        self.settings = settings or SolverSettings()
        self.tikhonov = tikhonov
        self.layout = _Layout(model.m, model.n_inputs, horizon)
        self.block = f_membership_block(model, next_cone=False)
        self._build()
        self.last: TubeSolution | None = None

    # -- assembly ---------------------------------------------------------

    def _build(self):
        L, model, s = self.layout, self.model, self.synth
        m, k, N = L.m, L.k, L.N
        d = s.direction
        blk = self.block
        rows, rhs = [], []
        for i in range(N):
            rows.append(blk.embed(L.n, L.y(i).start, L.u(i).start, L.y(i + 1).start))
            rhs.append(blk.h)
        # Terminal link from y_N to y_s + alpha d with inputs u_term.
        rows.append(self._terminal_rows(d))
        rhs.append(blk.h - blk.Gp @ s.y_s)
        # State constraints on the terminal target.
        HX, hX = model.system.X.H, model.system.X.h
        if HX.shape[0]:
            VX = np.vstack([HX @ V for V in model.config.maps])
            col = np.zeros((VX.shape[0], L.n))
            col[:, L.alpha] = VX @ d
            rows.append(sp.csr_matrix(col))
            rhs.append(np.tile(hX, model.mbar) - VX @ s.y_s)
        # Y x <= y_0, rewritten every step.
        self._x_rows = slice(sum(r.shape[0] for r in rows), sum(r.shape[0] for r in rows) + m)
        rows.append(sp.hstack([-sp.eye(m), sp.csr_matrix((m, L.n - m))]).tocsr())
        rhs.append(np.zeros(m))
        self.G = sp.vstack(rows).tocsr()
        self.h = np.concatenate(rhs)

        # Objective.
        P = sp.coo_matrix(2.0 * self.cost.P)
        pairs = [(L.y(i), L.u(i)) for i in range(N)] + [(L.y(N), slice(L.uterm, L.uterm + k))]
        r, cidx, v = [], [], []
        for ys, us in pairs:
            idx = np.r_[ys, us]
            r.append(idx[P.row])
            cidx.append(idx[P.col])
            v.append(P.data)
        self.H_true = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(cidx))),
                                    shape=(L.n, L.n))
        self.H = (self.H_true + sp.eye(L.n) * (2.0 * self.tikhonov)).tocsr()
        c = np.zeros(L.n)
        c[L.y(0)] += s.lam
        c[L.alpha] = -float(s.lam @ d) + s.rho / (1.0 - s.gamma)
        self.c = c
        self.constant = -float(s.lam @ s.y_s) - s.V_s
        self.lb = np.full(L.n, -np.inf)
        self.ub = np.full(L.n, np.inf)
        self.lb[L.alpha] = 0.0
        self.ub[L.alpha] = 1.0

    def _terminal_rows(self, d) -> sp.csr_matrix:
        L, blk = self.layout, self.block
        alpha = sp.csr_matrix((blk.Gp @ d).reshape(-1, 1))
        return sp.hstack([
            sp.csr_matrix((blk.rows, L.y(L.N).start)), blk.Gy,
            sp.csr_matrix((blk.rows, L.alpha - L.y(L.N).stop)), alpha, blk.Gu,
        ]).tocsr()

    def qp(self, x_hat) -> QuadraticProgram:
        h = self.h.copy()
        h[self._x_rows] = -self.model.Y @ np.asarray(x_hat, dtype=float)
        return QuadraticProgram(self.H, self.c, self.G, h, lb=self.lb, ub=self.ub, check_psd=False)

    # -- evaluation -------------------------------------------------------

    def objective(self, z) -> float:
        """True objective (no Tikhonov term), including constants."""
        return float(0.5 * z @ (self.H_true @ z) + self.c @ z + self.constant)

    def violation(self, z, x_hat) -> float:
        qp = self.qp(x_hat)
        v = np.max(self.G @ z - qp.h, initial=-np.inf)
        a = z[self.layout.alpha]
        return float(max(v, -a, a - 1.0))

    def unpack(self, z, result=None) -> TubeSolution:
        L, model = self.layout, self.model
        y = z[: (L.N + 1) * L.m].reshape(L.N + 1, L.m)
        u = z[L.u0:L.alpha].reshape(L.N, model.mbar, model.nu)
        alpha = float(np.clip(z[L.alpha], 0.0, 1.0))
        u_term = z[L.uterm:].reshape(model.mbar, model.nu)
        obj = self.objective(z)
        return TubeSolution(y, u, alpha, u_term, obj, obj - L.N * self.synth.V_s, z.copy(), result)

    def pack(self, y, u, alpha, u_term) -> np.ndarray:
        return np.concatenate([np.asarray(y, dtype=float).reshape(-1),
                               np.asarray(u, dtype=float).reshape(-1), [alpha],
                               np.asarray(u_term, dtype=float).reshape(-1)])

    # -- online -----------------------------------------------------------

    def step(self, x_hat) -> TubeSolution:
        """Solve the horizon QP at the measured state."""
        res = solve_qp(self.qp(x_hat), self.settings)
        if res.status is Status.INFEASIBLE:
            raise InfeasibleState(f"no feasible tube for x = {np.asarray(x_hat).tolist()}")
        if res.status is not Status.OPTIMAL:
            raise SolverError(f"MPC QP: {res.status.value}", res)
        sol = self.unpack(res.x, res)
        self.last = sol
        return sol

    def feedback(self, x_hat, sol: TubeSolution) -> FeedbackResult:
        return vertex_feedback(self.model, x_hat, sol.y[0], sol.u[0], self.settings)

    def __call__(self, x_hat):
        sol = self.step(x_hat)
        return self.feedback(x_hat, sol), sol


# ---------------------------------------------------------------------------
# Vertex feedback


def vertex_feedback(model: TubeModel, x_hat, y0, u0, settings: SolverSettings | None = None,
                    tikhonov: float = TIKHONOV) -> FeedbackResult:
    """Minimal-norm input among convex combinations of vertex inputs reproducing ``x_hat``.

    The interpolation equality is enforced up to a band of ``1e-9 (1 + ||x||)``;
    if even that is infeasible the weights minimizing the interpolation error
    are used, provided the error stays below ``1e-7``.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    U0 = np.asarray(u0, dtype=float).reshape(model.mbar, model.nu)
    settings = settings or SolverSettings()
    if np.any(model.Y @ x_hat > y0 + 1e-7 * (1.0 + np.abs(y0).max())):
        raise InterpolationInfeasible("state lies outside the first tube cross-section")
    X0 = model.vertices(y0)                       # (mbar, n)
    mbar = X0.shape[0]
    band = 1e-9 * (1.0 + np.abs(x_hat).max())
    H = 2.0 * (U0 @ U0.T + tikhonov * np.eye(mbar))
    G = np.vstack([X0.T, -X0.T])
    h = np.concatenate([x_hat + band, -x_hat + band])
    qp = QuadraticProgram(H, np.zeros(mbar), G, h, np.ones((1, mbar)), [1.0],
                          lb=np.zeros(mbar), check_psd=False)
    res = solve_qp(qp, settings)
    if res.status is Status.OPTIMAL:
        theta = np.clip(res.x, 0.0, None)
        theta /= theta.sum()
    else:
        theta = _closest_interpolation(X0, x_hat, settings)
    resid = float(np.abs(X0.T @ theta - x_hat).max())
    if resid > 1e-7 * (1.0 + np.abs(x_hat).max()):
        raise InterpolationInfeasible(f"interpolation error {resid:.3g}")
    return FeedbackResult(theta, U0.T @ theta, resid)


def _closest_interpolation(X0, x_hat, settings) -> np.ndarray:
    mbar, n = X0.shape
    # Variables (theta, t): minimize t with |X0' theta - x| <= t.
    G = np.block([[X0.T, -np.ones((n, 1))], [-X0.T, -np.ones((n, 1))]])
    h = np.concatenate([x_hat, -x_hat])
    A = np.concatenate([np.ones(mbar), [0.0]])[None]
    c = np.zeros(mbar + 1)
    c[-1] = 1.0
    res = solve_lp(LinearProgram(c, G, h, A, [1.0], lb=np.zeros(mbar + 1)), settings)
    if not res.ok:
        raise InterpolationInfeasible(f"interpolation LP: {res.status.value}")
    theta = np.clip(res.x[:mbar], 0.0, None)
    return theta / theta.sum()


# ---------------------------------------------------------------------------
# Offline evaluators of the Lyapunov ingredients


def rotated_cost(model: TubeModel, cost: StageCost, synth: SynthesisData, y, yp,
                 settings: SolverSettings | None = None, block: FMembershipBlock | None = None):
    """``V(y, y+) + lam'(y - y+) - V_s``; ``(inf, None)`` outside the membership set."""
    V, u = cost_to_travel(model, cost, y, yp, settings, block=block)
    if u is None:
        return np.inf, None
    return V + float(synth.lam @ (np.asarray(y) - np.asarray(yp))) - synth.V_s, u


@dataclass(frozen=True)
class TerminalValue:
    value: float
    alpha: float
    u: np.ndarray | None


def terminal_M(model: TubeModel, cost: StageCost, synth: SynthesisData, y,
               settings: SolverSettings | None = None,
               block: FMembershipBlock | None = None) -> TerminalValue:
    """``min over alpha in [0, 1] of R(y, y_s + alpha d) + rho alpha / (1 - gamma)``.

    Solved as one QP over ``(alpha, u)``.  Returns ``inf`` when no alpha admits
    a membership certificate.
    """
    y = np.asarray(y, dtype=float)
    block = block or f_membership_block(model, next_state=True)
    d = synth.direction
    k = model.n_inputs
    tol = membership_tol(y, synth.sigma)
    # Rows: Gy y + Gu u + Gp (y_s + alpha d) <= h.
    rhs = block.h - block.Gy @ y - block.Gp @ synth.y_s
    col_alpha = block.Gp @ d
    has_var = (np.diff(block.Gu.indptr) > 0) | (np.abs(col_alpha) > 0)
    if np.any(rhs[~has_var] < -tol):
        return TerminalValue(np.inf, np.nan, None)
    G = sp.hstack([sp.csr_matrix(col_alpha[has_var].reshape(-1, 1)), block.Gu[has_var]]).tocsr()
    H = sp.block_diag([sp.csr_matrix((1, 1)), sp.csr_matrix(2.0 * cost.Puu)]).tocsr()
    c = np.concatenate([[-float(synth.lam @ d) + synth.rho / (1.0 - synth.gamma)],
                        2.0 * cost.Pyu.T @ y])
    const = float(y @ cost.Pyy @ y) + float(synth.lam @ (y - synth.y_s)) - synth.V_s
    lb = np.concatenate([[0.0], np.full(k, -np.inf)])
    ub = np.concatenate([[1.0], np.full(k, np.inf)])
    # The exact rows first: loosening them lowers the value by about
    # multiplier * tol, which matters near y_s where M vanishes.
    res = solve_qp(QuadraticProgram(H, c, G, rhs[has_var], lb=lb, ub=ub, check_psd=False), settings)
    if not res.ok:
        res = solve_qp(QuadraticProgram(H, c, G, rhs[has_var] + tol, lb=lb, ub=ub,
                                        check_psd=False), settings)
    if res.status is Status.INFEASIBLE:
        return TerminalValue(np.inf, np.nan, None)
    if not res.ok:
        raise SolverError(f"terminal cost QP: {res.status.value}", res)
    return TerminalValue(res.objective + const, float(res.x[0]),
                         res.x[1:].reshape(model.mbar, model.nu))


def lyapunov_value(model: TubeModel, cost: StageCost, synth: SynthesisData, ys,
                   settings: SolverSettings | None = None) -> float:
    """Sum of rotated stage costs along ``ys`` plus the terminal cost of its last entry."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    block = f_membership_block(model, next_state=True)
    total = 0.0
    for y, yp in zip(ys[:-1], ys[1:]):
        r, _ = rotated_cost(model, cost, synth, y, yp, settings, block)
        if not np.isfinite(r):
            return np.inf
        total += r
    return total + terminal_M(model, cost, synth, ys[-1], settings, block).value


def descent_value(model: TubeModel, cost: StageCost, synth: SynthesisData, y,
                  settings: SolverSettings | None = None) -> float:
    """``min over y+ of R(y, y+) + M(y+)``, as one QP with the first parameter fixed."""
    ctrl = TubeMPC(model, cost, synth, 1, settings)
    qp = ctrl.qp(np.zeros(model.Y.shape[1]))
    m = model.m
    L = ctrl.layout
    # Replace Y x <= y_0 by y_0 = y.
    keep = np.ones(qp.G.shape[0], dtype=bool)
    keep[ctrl._x_rows] = False
    A = sp.hstack([sp.eye(m), sp.csr_matrix((m, L.n - m))]).tocsr()
    res = solve_qp(QuadraticProgram(ctrl.H, ctrl.c, qp.G[keep], qp.h[keep], A,
                                    np.asarray(y, dtype=float), lb=ctrl.lb, ub=ctrl.ub,
                                    check_psd=False), ctrl.settings)
    if res.status is Status.INFEASIBLE:
        return np.inf
    if not res.ok:
        raise SolverError(f"descent QP: {res.status.value}", res)
    return ctrl.objective(res.x) - synth.V_s


def shifted_warm_start(ctrl: TubeMPC, sol: TubeSolution,
                       settings: SolverSettings | None = None) -> np.ndarray:
    """Shift a horizon solution by one step and extend it along the terminal segment.

    The old terminal target ``y_s + alpha d`` becomes the last tube parameter,
    the new terminal coordinate is ``gamma alpha``, and the new terminal
    inputs are the cost-to-travel minimizer between the two targets.
    """
    s = ctrl.synth
    d = s.direction
    y_last = s.y_s + sol.alpha * d
    alpha_new = s.gamma * sol.alpha
    _, u_term = cost_to_travel(ctrl.model, ctrl.cost, y_last, s.y_s + alpha_new * d, settings)
    if u_term is None:
        raise SolverError("terminal extension has no membership certificate")
    y = np.vstack([sol.y[1:], y_last])
    u = np.concatenate([sol.u[1:], sol.u_term[None]], axis=0)
    return ctrl.pack(y, u, alpha_new, u_term)
