"""Seeded closed-loop simulation of the tube controller.

Random numbers come from numpy's Philox counter-based generator keyed by the
scenario seed, so a log is reproducible bit for bit on any platform that
runs the same numpy build.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .controller import InfeasibleState, InterpolationInfeasible, TubeMPC
from .geometry import polytope_vertices
from .solver import LinearProgram, SolverError, Status, solve_lp
from .system import UncertainSystem

DISTURBANCE_MODES = ("box-uniform", "vertex-extreme")
MODEL_MODES = ("fixed-vertex", "dirichlet-mix")


class RecursiveFeasibilityViolation(RuntimeError):
    """The controller lost feasibility after a feasible step."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One random uncertainty scenario.

    ``disturbance`` picks how ``w`` is drawn each step: ``box-uniform`` draws
    each coordinate uniformly over the bounding box of ``W`` (rejecting points
    outside ``W``); ``vertex-extreme`` picks a vertex of ``W``.  ``model``
    picks the model realization: ``fixed-vertex`` uses one model vertex drawn
    uniformly, ``dirichlet-mix`` a flat-Dirichlet convex combination.
    """

    seed: int
    steps: int
    x0: tuple
    disturbance: str = "box-uniform"
    model: str = "fixed-vertex"

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if int(self.steps) < 1:
            raise ValueError("steps must be at least 1")
        if self.disturbance not in DISTURBANCE_MODES:
            raise ValueError(f"disturbance mode must be one of {DISTURBANCE_MODES}")
        if self.model not in MODEL_MODES:
            raise ValueError(f"model mode must be one of {MODEL_MODES}")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))


@dataclass(frozen=True, eq=False)
class StepLog:
    k: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    model_weights: np.ndarray
    lyapunov: float
    feasible: bool
    residual: float            # max(Y x - y_0)
    y0: np.ndarray
    rotated_stage: float       # R(y_0, y_1) at the optimal inputs
    iterations: int = 0
    extras: dict = field(default_factory=dict)


class UncertaintySampler:
    """Stateful draw of ``(w, model weights)`` for one scenario."""

    def __init__(self, sys: UncertainSystem, cfg: ScenarioConfig):
        self.sys = sys
        self.cfg = cfg
        self.rng = np.random.Generator(np.random.Philox(int(cfg.seed)))
        self._lo, self._hi = _bounding_box(sys)
        self._vertices = None
        if cfg.disturbance == "vertex-extreme":
            box = sys.W.box_bounds()
            self._vertices = sys.W.box_vertices() if box is not None else \
                polytope_vertices(sys.W.H, sys.W.h)

    def draw(self):
        return sample_uncertainty(self.sys, self.cfg, self.rng, self._lo, self._hi, self._vertices)


def _bounding_box(sys: UncertainSystem):
    box = sys.W.box_bounds()
    if box is not None:
        return box
    nw = sys.nw
    lo, hi = np.empty(nw), np.empty(nw)
    for i in range(nw):
        e = np.zeros(nw)
        e[i] = 1.0
        for sign, out in ((1.0, hi), (-1.0, lo)):
            res = solve_lp(LinearProgram(-sign * e, sys.W.H, sys.W.h))
            if res.status is not Status.OPTIMAL:
                raise SolverError(f"bounding box of W: {res.status.value}", res)
            out[i] = sign * -res.objective
    return lo, hi


def sample_uncertainty(sys: UncertainSystem, cfg: ScenarioConfig, rng: np.random.Generator,
                       lo=None, hi=None, vertices=None, max_tries: int = 10_000):
    """Draw ``(w, weights)`` according to the scenario's sampling modes.

    The draw order is fixed (disturbance first, then model weights) so the
    stream depends only on the seed.
    """
    if lo is None or hi is None:
        lo, hi = _bounding_box(sys)
    if cfg.disturbance == "vertex-extreme":
        if vertices is None:
            box = sys.W.box_bounds()
            vertices = sys.W.box_vertices() if box is not None else polytope_vertices(sys.W.H, sys.W.h)
        w = np.array(vertices[rng.integers(len(vertices))], dtype=float)
    else:
        exact_box = sys.W.box_bounds() is not None
        for _ in range(max_tries):
            w = rng.uniform(lo, hi)
            if exact_box or sys.W.contains(w):
                break
        else:
            raise RuntimeError("rejection sampling of W failed; the set is too thin")
    l = sys.l
    if l == 1:
        weights = np.ones(1)
    elif cfg.model == "fixed-vertex":
        weights = np.zeros(l)
        weights[rng.integers(l)] = 1.0
    else:
        weights = rng.dirichlet(np.ones(l))
    return w, weights


def realize(sys: UncertainSystem, weights):
    """``(A, B)`` for convex model weights."""
    weights = np.asarray(weights, dtype=float)
    return (np.tensordot(weights, sys.A_vertices, axes=1),
            np.tensordot(weights, sys.B_vertices, axes=1))


def run_closed_loop(controller: TubeMPC, sys: UncertainSystem, cfg: ScenarioConfig) -> list[StepLog]:
    """Apply the vertex feedback for ``cfg.steps`` steps and log each one.

    ``sys`` is the plant; it normally equals the controller's model.  An
    infeasible first step raises :class:`InfeasibleState`; losing feasibility
    later raises :class:`RecursiveFeasibilityViolation`.
    """
    model = controller.model
    sampler = UncertaintySampler(sys, cfg)
    x = np.array(cfg.x0, dtype=float)
    if x.size != sys.nx:
        raise ValueError(f"x0 has {x.size} entries, expected {sys.nx}")
    synth, cost = controller.synth, controller.cost
    logs: list[StepLog] = []
    for k in range(cfg.steps):
        try:
            sol = controller.step(x)
            fb = controller.feedback(x, sol)
        except (InfeasibleState, InterpolationInfeasible) as exc:
            if k == 0:
                raise
            raise RecursiveFeasibilityViolation(f"step {k}: {exc}") from exc
        y0, y1 = sol.y[0], sol.y[1]
        rotated = cost(y0, sol.u[0]) + float(synth.lam @ (y0 - y1)) - synth.V_s
        w, weights = sampler.draw()
        logs.append(StepLog(
            k=k, x=x.copy(), u=np.asarray(fb.u, dtype=float).copy(), w=w, model_weights=weights,
            lyapunov=float(sol.lyapunov), feasible=True,
            residual=float(np.max(model.Y @ x - y0)), y0=y0.copy(), rotated_stage=float(rotated),
            iterations=sol.result.iterations if sol.result is not None else 0,
        ))
        A, B = realize(sys, weights)
        x = A @ x + B @ fb.u + sys.C @ w
    return logs


# ---------------------------------------------------------------------------
# Output


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(logs: list[StepLog], target) -> None:
    """Columns ``k, x0.., u0.., w0.., lyapunov, residual``.

    ``target`` is a path or an open text stream.
    """
    if not logs:
        raise ValueError("nothing to write")
    if not hasattr(target, "write"):
        with open(target, "w", newline="") as fh:
            write_csv(logs, fh)
        return
    nx, nu, nw = logs[0].x.size, logs[0].u.size, logs[0].w.size
    header = (["k"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
              + [f"w{i}" for i in range(nw)] + ["lyapunov", "residual"])
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(header)
    for log in logs:
        writer.writerow([log.k] + [_fmt(v) for v in log.x] + [_fmt(v) for v in log.u]
                        + [_fmt(v) for v in log.w] + [_fmt(log.lyapunov), _fmt(log.residual)])


def tube_dump(logs: list[StepLog], controller: TubeMPC) -> list[dict]:
    """Per-step tube cross-section: parameter and vertex list (in vertex-set order)."""
    model = controller.model
    return [{"k": log.k, "y": log.y0.tolist(), "vertices": model.vertices(log.y0).tolist()}
            for log in logs]


def ordered_outline(points, tol: float = 1e-9) -> np.ndarray:
    """Distinct planar points ordered counter-clockwise around their centroid, closed."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[1] != 2:
        raise ValueError("outlines are only defined for planar points")
    scale = tol * (1.0 + float(np.abs(P).max(initial=0.0)))
    keys = np.round(P / scale).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    P = P[np.sort(first)]
    c = P.mean(axis=0)
    order = np.argsort(np.arctan2(P[:, 1] - c[1], P[:, 0] - c[0]), kind="stable")
    P = P[order]
    return np.vstack([P, P[:1]])


def polyline_rows(series: str, step: int, vertices) -> list[list]:
    """CSV rows ``series, step, index, coordinates`` for one cross-section.

    Planar sets become a closed counter-clockwise outline; higher-dimensional
    ones are listed as plain vertex sets.
    """
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    pts = ordered_outline(V) if V.shape[1] == 2 else V
    return [[series, step, i] + [_fmt(v) for v in p] for i, p in enumerate(pts)]


def lyapunov_is_descending(logs: list[StepLog], floor: float = 1e-6, slack: float = 1e-6) -> bool:
    """Non-increasing everywhere and strictly decreasing while above ``floor``."""
    vals = [log.lyapunov for log in logs]
    for a, b in zip(vals[:-1], vals[1:]):
        if b > a + slack:
            return False
        if a > floor and not b < a:
            return False
    return all(math.isfinite(v) for v in vals)
