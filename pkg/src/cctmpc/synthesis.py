"""Offline tube synthesis.

The central object is the one-step membership block: linear rows over a tube
parameter ``y``, stacked vertex inputs ``u = (u_1, ..., u_mbar)`` and a
successor parameter ``y+`` certifying that every model vertex steers every
point of ``P(Y, y)`` into ``P(Y, y+)`` under the vertex-interpolated feedback,
for every admissible disturbance.  On top of it this module computes a
contractive seed, the optimal steady tube with its multiplier, and the scalars
that make the terminal cost a Lyapunov function.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cost import NonQuadraticCost, StageCost
from .geometry import SimplicityReport, Template, VertexConfiguration, check_entirely_simple
from .solver import (
    LinearProgram,
    QuadraticProgram,
    SolverError,
    SolverSettings,
    Status,
    solve_lp,
    solve_qp,
)
from .system import UncertainSystem, disturbance_support


class SynthesisInfeasible(RuntimeError):
    """No contractive polytope exists for this template; the template needs more rows."""


class SynthesisError(RuntimeError):
    pass


class DegenerateIndex(SynthesisError):
    pass


class GammaNotContractive(SynthesisError):
    pass


@dataclass(frozen=True, eq=False)
class TubeModel:
    """Template, vertex configuration, system and disturbance support bundled together."""

    Y: np.ndarray
    config: VertexConfiguration
    system: UncertainSystem
    wbar: np.ndarray

    @classmethod
    def build(cls, template: Template, config: VertexConfiguration, system: UncertainSystem,
              settings: SolverSettings | None = None) -> "TubeModel":
        if template.n != system.nx:
            raise ValueError(f"template dimension {template.n} differs from state dimension {system.nx}")
        return cls(template.Y, config, system, disturbance_support(template.Y, system, settings))

    @property
    def m(self) -> int:
        return self.Y.shape[0]

    @property
    def mbar(self) -> int:
        return self.config.mbar

    @property
    def nu(self) -> int:
        return self.system.nu

    @property
    def n_inputs(self) -> int:
        """Length of the stacked vertex-input vector."""
        return self.mbar * self.nu

    @property
    def E(self) -> np.ndarray:
        return self.config.E

    def vertices(self, y) -> np.ndarray:
        return self.config.vertices(y)


# ---------------------------------------------------------------------------
# Membership block


@dataclass(frozen=True, eq=False)
class FMembershipBlock:
    """Rows ``Gy y + Gu u + Gp y+ <= h`` with row ranges labelled by kind."""

    Gy: sp.csr_matrix
    Gu: sp.csr_matrix
    Gp: sp.csr_matrix
    h: np.ndarray
    sections: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.h.size

    def embed(self, n_vars: int, y_off: int, u_off: int, yp_off: int) -> sp.csr_matrix:
        """Place the three column blocks at the given offsets of an ``n_vars`` vector."""
        parts = []
        for M, off in ((self.Gy, y_off), (self.Gu, u_off), (self.Gp, yp_off)):
            C = M.tocoo()
            parts.append((C.row, C.col + off, C.data))
        r = np.concatenate([p[0] for p in parts])
        c = np.concatenate([p[1] for p in parts])
        d = np.concatenate([p[2] for p in parts])
        return sp.csr_matrix((d, (r, c)), shape=(self.rows, n_vars))

    def lhs(self, y, u, yp) -> np.ndarray:
        return self.Gy @ y + self.Gu @ np.asarray(u).reshape(-1) + self.Gp @ yp

    def violation(self, y, u, yp) -> float:
        return float(np.max(self.lhs(y, u, yp) - self.h, initial=-np.inf))


def f_membership_block(model: TubeModel, *, next_cone: bool = True,
                       next_state: bool = False) -> FMembershipBlock:
    """Assemble the membership rows.

    In order: for each vertex i and model vertex j,
    ``Y A_j V_i y + Y B_j u_i - y+ <= -wbar``; then ``E y <= 0``; ``E y+ <= 0``
    (``next_cone``); input constraints on every ``u_i``; state constraints on
    every ``V_i y``; state constraints on every ``V_i y+`` (``next_state``).
    """
    Y, sys, vc = model.Y, model.system, model.config
    m, mbar, nu = model.m, model.mbar, model.nu
    E = model.E
    HX, hX, HU, hU = sys.X.H, sys.X.h, sys.U.H, sys.U.h
    if sys.nx != Y.shape[1]:
        raise ValueError("template and system state dimensions differ")
    if model.wbar.size != m:
        raise ValueError("disturbance support has the wrong length")

    Gy, Gu, Gp, h = [], [], [], []
    sections = {}

    def add(name, gy, gu, gp, rhs):
        start = sum(len(x) for x in h)
        Gy.append(sp.csr_matrix(gy) if gy is not None else sp.csr_matrix((len(rhs), m)))
        Gu.append(sp.csr_matrix(gu) if gu is not None else sp.csr_matrix((len(rhs), mbar * nu)))
        Gp.append(sp.csr_matrix(gp) if gp is not None else sp.csr_matrix((len(rhs), m)))
        h.append(np.asarray(rhs, dtype=float))
        sections[name] = (start, start + len(rhs))

    dyn_y, dyn_u, dyn_p, dyn_h = [], [], [], []
    YB = [Y @ B for B in sys.B_vertices]
    for i, V in enumerate(vc.maps):
        for j, A in enumerate(sys.A_vertices):
            dyn_y.append(Y @ A @ V)
            gu = np.zeros((m, mbar * nu))
            gu[:, i * nu:(i + 1) * nu] = YB[j]
            dyn_u.append(gu)
            dyn_p.append(-np.eye(m))
            dyn_h.append(-model.wbar)
    add("dynamics", np.vstack(dyn_y), np.vstack(dyn_u), np.vstack(dyn_p), np.concatenate(dyn_h))
    add("cone", E, None, None, np.zeros(E.shape[0]))
    if next_cone:
        add("next_cone", None, None, E, np.zeros(E.shape[0]))
    if HU.shape[0]:
        add("inputs", None, sp.kron(sp.eye(mbar), HU), None, np.tile(hU, mbar))
    if HX.shape[0]:
        add("states", np.vstack([HX @ V for V in vc.maps]), None, None, np.tile(hX, mbar))
        if next_state:
            add("next_states", None, None, np.vstack([HX @ V for V in vc.maps]), np.tile(hX, mbar))
    return FMembershipBlock(_clean(sp.vstack(Gy)), _clean(sp.vstack(Gu)), _clean(sp.vstack(Gp)),
                            np.concatenate(h), sections)


def _clean(M) -> sp.csr_matrix:
    """Drop roundoff-level entries (e.g. ``cos(pi/2)``) so they do not pose as structure."""
    M = sp.csr_matrix(M)
    if M.nnz:
        M.data[np.abs(M.data) <= 1e-13 * np.abs(M.data).max()] = 0.0
        M.eliminate_zeros()
    return M


# ---------------------------------------------------------------------------
# One-step problems over the vertex inputs


def _fixed_parameter_rows(block: FMembershipBlock, y, yp, tol: float):
    """Reduce the block to rows in ``u`` for fixed ``(y, y+)``.

    Returns ``(G, h)`` or None when a row not involving ``u`` is violated by
    more than ``tol``.  Rows in ``u`` are relaxed by ``tol``.
    """
    rhs = block.h - block.Gy @ y - block.Gp @ yp
    has_u = np.diff(block.Gu.indptr) > 0
    if np.any(rhs[~has_u] < -tol):
        return None
    return block.Gu[has_u], rhs[has_u] + tol


def membership_tol(y, yp) -> float:
    return 1e-9 * (1.0 + max(np.abs(y).max(initial=0.0), np.abs(yp).max(initial=0.0)))


def f_membership_feasible(model: TubeModel, y, yp, settings: SolverSettings | None = None,
                          tol: float | None = None, block: FMembershipBlock | None = None):
    """Decide ``(y, y+)`` membership by an LP over the vertex inputs.

    Returns the certifying inputs, or None if there are none.
    """
    y = np.asarray(y, dtype=float)
    yp = np.asarray(yp, dtype=float)
    block = block or f_membership_block(model, next_state=True)
    tol = membership_tol(y, yp) if tol is None else tol
    red = _fixed_parameter_rows(block, y, yp, tol)
    if red is None:
        return None
    G, h = red
    res = solve_lp(LinearProgram(np.zeros(model.n_inputs), G, h), settings)
    if res.status is Status.INFEASIBLE:
        return None
    if not res.ok:
        raise SolverError(f"membership LP: {res.status.value}", res)
    return res.x.reshape(model.mbar, model.nu)


def cost_to_travel(model: TubeModel, cost: StageCost, y, yp,
                   settings: SolverSettings | None = None, tol: float | None = None,
                   block: FMembershipBlock | None = None):
    """Minimal stage cost for moving ``y`` to ``y+`` in one step.

    Returns ``(value, u)`` with ``u`` of shape (mbar, nu); ``(inf, None)`` if
    ``(y, y+)`` admits no certifying inputs.
    """
    y = np.asarray(y, dtype=float)
    yp = np.asarray(yp, dtype=float)
    block = block or f_membership_block(model, next_state=True)
    tol = membership_tol(y, yp) if tol is None else tol
    red = _fixed_parameter_rows(block, y, yp, tol)
    if red is None:
        return np.inf, None
    G, h = red
    Puu = cost.Puu
    c = 2.0 * cost.Pyu.T @ y
    const = float(y @ cost.Pyy @ y)
    res = solve_qp(QuadraticProgram(2.0 * Puu, c, G, h, check_psd=False), settings)
    if res.status is Status.INFEASIBLE:
        return np.inf, None
    if not res.ok:
        raise SolverError(f"cost-to-travel QP: {res.status.value}", res)
    return res.objective + const, res.x.reshape(model.mbar, model.nu)


# ---------------------------------------------------------------------------
# Contractive seed


@dataclass(frozen=True, eq=False)
class ContractiveSeed:
    sigma: np.ndarray
    u: np.ndarray              # (mbar, nu)
    simplicity: SimplicityReport


def synthesize_contractive(model: TubeModel, beta: float, settings: SolverSettings | None = None,
                           *, anchor=None, eps: float = 1e-6) -> ContractiveSeed:
    """Find ``y`` with ``(y, beta y)`` in the membership set.

    Among feasible points the one minimizing ``sum ||u_i||^2 + eps ||y||^2`` is
    returned.  ``anchor`` adds ``y >= anchor`` elementwise.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    m, k = model.m, model.n_inputs
    block = f_membership_block(model, next_cone=False)
    G = sp.hstack([block.Gy + beta * block.Gp, block.Gu]).tocsr()
    h = block.h
    if anchor is not None:
        G = sp.vstack([G, sp.hstack([-sp.eye(m), sp.csr_matrix((m, k))])]).tocsr()
        h = np.concatenate([h, -np.asarray(anchor, dtype=float)])
    H = sp.diags(np.concatenate([np.full(m, 2.0 * eps), np.full(k, 2.0)]))
    qp = QuadraticProgram(H, np.zeros(m + k), G, h, check_psd=False)
    res = solve_qp(qp, settings)
    if res.status is Status.INFEASIBLE:
        raise SynthesisInfeasible(f"no {beta}-contractive polytope for this template")
    if not res.ok:
        raise SolverError(f"contractive synthesis: {res.status.value}", res)
    sigma = res.x[:m]
    report = check_entirely_simple(Template(model.Y, sigma))
    return ContractiveSeed(sigma, res.x[m:].reshape(model.mbar, model.nu), report)


# ---------------------------------------------------------------------------
# Steady tube


@dataclass(frozen=True, eq=False)
class SteadyState:
    y: np.ndarray
    u: np.ndarray              # (mbar, nu)
    lam: np.ndarray            # multiplier of y - y+ = 0
    value: float
    dual_value: float


def solve_steady(model: TubeModel, cost: StageCost, settings: SolverSettings | None = None) -> SteadyState:
    """Cheapest parameter that can be held in place, with the multiplier of ``y = y+``.

    The multiplier enters the Lagrangian as ``l(y, u) + lam'(y - y+)``.  The
    problem is solved with ``y+ = y`` substituted, so ``lam = Gp' mu`` in terms
    of the membership multipliers ``mu``.  When these are not unique (the
    feasible set may have no interior) the one minimizing ``||lam||_1`` is
    chosen, which keeps the terminal penalty small.
    """
    m, k = model.m, model.n_inputs
    block = f_membership_block(model, next_state=True)
    G = sp.hstack([block.Gy + block.Gp, block.Gu]).tocsr()
    H = sp.csr_matrix(2.0 * cost.P)
    qp = QuadraticProgram(H, np.zeros(m + k), G, block.h, check_psd=False)
    res = solve_qp(qp, settings)
    if res.status is Status.INFEASIBLE:
        raise SynthesisInfeasible("no parameter of this template can be held in place")
    if res.status is not Status.OPTIMAL:
        raise SynthesisError(f"steady problem: {res.status.value} (expected feasible)")
    z = res.x
    mu = _least_multiplier(H @ z, G, block.h - G @ z, block.Gp, settings)
    if mu is None:
        mu = res.dual_ineq
    lam = block.Gp.T @ mu
    dual_value = float(-0.5 * z @ (H @ z) - block.h @ mu)
    return SteadyState(z[:m], z[m:].reshape(model.mbar, model.nu), lam, res.objective, dual_value)


def _least_multiplier(grad, G, slack, Gp, settings):
    """``mu >= 0`` on the active rows with ``grad + G' mu = 0`` minimizing ``||Gp' mu||_1``.

    A tiny weight on ``sum(mu)`` makes the choice deterministic.  Returns None
    if the LP fails, e.g. when the active set was misidentified.
    """
    act = np.flatnonzero(slack <= 1e-9 * (1.0 + np.abs(slack).max(initial=0.0)))
    if act.size == 0:
        return np.zeros(G.shape[0]) if np.abs(grad).max(initial=0.0) <= 1e-9 else None
    Ga = G[act]
    Pa = Gp[act].T.tocsr()                              # (m, |act|)
    m = Pa.shape[0]
    # Variables (mu_act, t) with -t <= Gp' mu <= t.
    c = np.concatenate([np.full(act.size, 1e-6), np.ones(m)])
    Gi = sp.vstack([sp.hstack([Pa, -sp.eye(m)]), sp.hstack([-Pa, -sp.eye(m)])]).tocsr()
    Aeq = sp.hstack([Ga.T, sp.csr_matrix((G.shape[1], m))]).tocsr()
    lb = np.concatenate([np.zeros(act.size), np.zeros(m)])
    res = solve_lp(LinearProgram(c, Gi, np.zeros(2 * m), Aeq, -grad, lb=lb), settings)
    if not res.ok:
        return None
    mu = np.zeros(G.shape[0])
    mu[act] = np.maximum(res.x[:act.size], 0.0)
    return mu


# ---------------------------------------------------------------------------
# Terminal scalars


def degenerate_tol(sigma) -> float:
    return 1e-9 * (1.0 + float(np.max(np.abs(sigma), initial=0.0)))


def contraction_gamma(sigma, y_s, beta: float, tol: float | None = None) -> float:
    """Smallest ``gamma`` with ``beta sigma <= gamma sigma + (1 - gamma) y_s``, clamped at 0."""
    sigma = np.asarray(sigma, dtype=float)
    y_s = np.asarray(y_s, dtype=float)
    tol = degenerate_tol(sigma) if tol is None else tol
    gap = sigma - y_s
    if np.any(gap < -tol):
        raise SynthesisError("steady parameter exceeds sigma")
    num = beta * sigma - y_s
    flat = gap <= tol
    if np.any(num[flat] > tol):
        i = int(np.flatnonzero(flat & (num > tol))[0])
        raise DegenerateIndex(f"sigma[{i}] equals y_s[{i}] but beta*sigma[{i}] > y_s[{i}]")
    ratios = num[~flat] / gap[~flat]
    gamma = max(0.0, float(np.max(ratios, initial=0.0)))
    if gamma >= 1.0:
        raise GammaNotContractive(f"gamma = {gamma} is not below 1")
    return gamma


def lipschitz_bound(cost, sigma, u_sigma, y_s, u_s) -> float:
    """Gradient bound of a quadratic cost along the segment between two points.

    The gradient is affine, so its norm is convex along the segment and the
    maximum is attained at an endpoint.
    """
    if not isinstance(cost, StageCost):
        raise NonQuadraticCost("only quadratic stage costs have an exact segment bound")
    return max(float(np.linalg.norm(cost.gradient(sigma, u_sigma))),
               float(np.linalg.norm(cost.gradient(y_s, u_s))))


def compute_rho(ell_bar: float, sigma, u_sigma, y_s, u_s, lam, gamma: float) -> float:
    if not gamma < 1.0:
        raise GammaNotContractive("gamma must be below 1")
    d_y = np.asarray(sigma, dtype=float) - np.asarray(y_s, dtype=float)
    d_u = np.asarray(u_sigma, dtype=float).reshape(-1) - np.asarray(u_s, dtype=float).reshape(-1)
    return float(ell_bar * np.linalg.norm(np.concatenate([d_y, d_u]))
                 + (1.0 - gamma) * abs(float(np.asarray(lam) @ d_y)))


# ---------------------------------------------------------------------------
# Pipeline


@dataclass(frozen=True, eq=False)
class SynthesisData:
    sigma: np.ndarray
    beta: float
    y_s: np.ndarray
    u_s: np.ndarray
    lam: np.ndarray
    V_s: float
    u_sigma: np.ndarray
    gamma: float
    ell_bar: float
    rho: float
    anchored: bool = False
    sigma_simple: bool = True
    steady_terminal: bool = False

    @property
    def direction(self) -> np.ndarray:
        """``sigma - y_s``: the terminal segment direction."""
        return self.sigma - self.y_s

    def to_json(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "beta": self.beta,
            "y_s": self.y_s.tolist(),
            "u_s": self.u_s.tolist(),
            "lambda": self.lam.tolist(),
            "V_s": self.V_s,
            "u_sigma": self.u_sigma.tolist(),
            "gamma": self.gamma,
            "ell_bar": self.ell_bar,
            "rho": self.rho,
            "anchored": self.anchored,
            "sigma_simple": self.sigma_simple,
            "steady_terminal": self.steady_terminal,
        }

    @classmethod
    def from_json(cls, data) -> "SynthesisData":
        return cls(
            sigma=np.asarray(data["sigma"], dtype=float),
            beta=float(data["beta"]),
            y_s=np.asarray(data["y_s"], dtype=float),
            u_s=np.atleast_2d(np.asarray(data["u_s"], dtype=float)),
            lam=np.asarray(data["lambda"], dtype=float),
            V_s=float(data["V_s"]),
            u_sigma=np.atleast_2d(np.asarray(data["u_sigma"], dtype=float)),
            gamma=float(data["gamma"]),
            ell_bar=float(data["ell_bar"]),
            rho=float(data["rho"]),
            anchored=bool(data.get("anchored", False)),
            sigma_simple=bool(data.get("sigma_simple", True)),
            steady_terminal=bool(data.get("steady_terminal", False)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def synthesize(model: TubeModel, cost: StageCost, beta: float,
               settings: SolverSettings | None = None, *,
               steady_fallback: bool = False) -> SynthesisData:
    """Contractive seed, steady tube and terminal scalars in one pass.

    If the steady parameter does not lie below the seed, the seed is
    re-synthesized with ``y >= y_s`` imposed.

    With ``steady_fallback=True`` a template admitting no ``beta``-contractive
    polytope falls back to the terminal set ``{y_s}``: ``sigma = y_s``,
    ``gamma = 0`` and ``rho = 0``, so the terminal cost reduces to
    ``R(y, y_s)``.  Without it :class:`SynthesisInfeasible` propagates.
    """
    steady = solve_steady(model, cost, settings)
    try:
        seed = synthesize_contractive(model, beta, settings)
    except SynthesisInfeasible:
        if not steady_fallback:
            raise
        report = check_entirely_simple(Template(model.Y, steady.y))
        ell_bar = lipschitz_bound(cost, steady.y, steady.u, steady.y, steady.u)
        return SynthesisData(steady.y.copy(), beta, steady.y, steady.u, steady.lam, steady.value,
                             steady.u.copy(), 0.0, ell_bar, 0.0, False, report.passed, True)
    sigma = seed.sigma
    anchored = False
    if np.any(steady.y > sigma + degenerate_tol(sigma)):
        seed = synthesize_contractive(model, beta, settings, anchor=steady.y)
        sigma = seed.sigma
        anchored = True
    sigma = np.maximum(sigma, steady.y)
    V_sigma, u_sigma = cost_to_travel(model, cost, sigma, sigma, settings)
    if u_sigma is None:
        raise SynthesisError("sigma cannot be held in place; the seed must contain the origin's image")
    gamma = contraction_gamma(sigma, steady.y, beta)
    ell_bar = lipschitz_bound(cost, sigma, u_sigma, steady.y, steady.u)
    rho = compute_rho(ell_bar, sigma, u_sigma, steady.y, steady.u, steady.lam, gamma)
    return SynthesisData(sigma, beta, steady.y, steady.u, steady.lam, steady.value, u_sigma,
                         gamma, ell_bar, rho, anchored, seed.simplicity.passed)
