"""Numerical property checks for a synthesized tube controller.

Each check returns a :class:`CheckResult`; the command-line ``verify``
subcommand prints them and the test suite asserts on them.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .controller import TubeMPC, descent_value, terminal_M
from .cost import StageCost
from .geometry import (Template, VertexConfiguration, check_entirely_simple, hull_distance,
                       polytope_vertices)
from .simulate import ScenarioConfig, run_closed_loop
from .solver import SolverSettings
from .synthesis import SynthesisData, TubeModel, f_membership_block, f_membership_feasible


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f} s)"


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# Sampling


def cone_ray_limit(E, base, direction) -> float:
    """Largest ``t`` with ``E (base + t direction) <= 0``; ``inf`` if unlimited."""
    Eb = E @ base
    Ed = E @ direction
    up = Ed > 0
    if not np.any(up):
        return np.inf
    return float(np.min(np.maximum(-Eb[up], 0.0) / Ed[up]))


def sample_cone_parameters(Y, vc: VertexConfiguration, count: int, seed: int = 0) -> np.ndarray:
    """Random parameters inside the configuration cone ``{y : E y <= 0}``.

    Each sample rescales and translates the configuration seed (moves that
    keep the cone) and then walks a uniformly random fraction of the way to
    the cone boundary along a random direction.
    """
    rng = _rng(seed)
    Y = np.asarray(Y, dtype=float)
    m, n = Y.shape
    sigma = vc.sigma
    size = float(np.mean(np.abs(sigma)))
    out = np.empty((count, m))
    for k in range(count):
        base = rng.uniform(0.5, 2.0) * sigma + Y @ rng.normal(0.0, 0.5 * size, n)
        d = rng.normal(size=m)
        d *= np.linalg.norm(base) / np.linalg.norm(d)
        t = min(cone_ray_limit(vc.E, base, d), 1.0)
        out[k] = base + rng.uniform() * t * d
    return out


def sample_terminal_parameters(model: TubeModel, cost: StageCost, synth: SynthesisData,
                               count: int, seed: int = 0, max_tries: int | None = None,
                               settings: SolverSettings | None = None):
    """Parameters with a finite terminal cost, and those costs.

    Candidates are points of the terminal segment shrunk about the steady
    tube's center and perturbed inside the configuration cone; candidates
    with an infinite terminal cost are discarded.
    """
    rng = _rng(seed)
    Y, E = model.Y, model.E
    center = model.vertices(synth.y_s).mean(axis=0)
    block = f_membership_block(model, next_state=True)
    ys, values = [], []
    tries = 0
    max_tries = max_tries or 20 * count
    while len(ys) < count and tries < max_tries:
        tries += 1
        y = synth.y_s + rng.uniform() * synth.direction
        s = rng.uniform(0.5, 1.0)
        y = s * y + (1.0 - s) * (Y @ center)
        d = rng.normal(size=y.size) * (0.05 * (1.0 + np.abs(y)))
        y = y + rng.uniform() * min(cone_ray_limit(E, y, d), 1.0) * d
        M = terminal_M(model, cost, synth, y, settings, block).value
        if np.isfinite(M):
            ys.append(y)
            values.append(M)
    return np.array(ys).reshape(-1, model.m), np.array(values)


# ---------------------------------------------------------------------------
# Checks


def seed_simplicity_check(template: Template) -> CheckResult:
    t0 = time.perf_counter()
    rep = check_entirely_simple(template)
    if rep.passed:
        detail = "seed polytope is entirely simple"
    else:
        detail = (f"seed polytope is not entirely simple: rows {list(rep.offending[0])} "
                  f"meet at {np.round(rep.points[0], 12).tolist()}")
    return CheckResult("seed-simplicity", rep.passed, detail, time.perf_counter() - t0)


def hull_equality_check(Y, vc: VertexConfiguration, ys, tol: float = 1e-8,
                        settings: SolverSettings | None = None) -> CheckResult:
    """Double inclusion ``P(Y, y) = conv{V_i y}`` for each parameter in ``ys``.

    Inner: every ``V_i y`` satisfies ``Y x <= y``.  Outer: every vertex of
    ``P(Y, y)`` lies within ``tol`` (sup-norm) of the hull of the ``V_i y``.
    """
    t0 = time.perf_counter()
    Y = np.asarray(Y, dtype=float)
    worst_in, worst_out = 0.0, 0.0
    for y in np.atleast_2d(ys):
        V = vc.vertices(y)
        worst_in = max(worst_in, float(np.max(V @ Y.T - y)))
        for v in polytope_vertices(Y, y):
            d = float(np.min(np.max(np.abs(V - v), axis=1)))
            if d > tol:
                d = hull_distance(v, V, settings)
            worst_out = max(worst_out, d)
    ok = worst_in <= tol and worst_out <= tol
    return CheckResult("hull-equality", ok,
                       f"{len(np.atleast_2d(ys))} parameters, inner {worst_in:.1e}, outer {worst_out:.1e}",
                       time.perf_counter() - t0)


def contraction_sequence(synth: SynthesisData, steps: int) -> np.ndarray:
    """``y_k = gamma^k sigma + (1 - gamma^k) y_s`` for ``k = 0..steps``."""
    g = synth.gamma ** np.arange(steps + 1)
    return g[:, None] * synth.sigma + (1.0 - g)[:, None] * synth.y_s


def sequence_check(model: TubeModel, synth: SynthesisData, steps: int = 20,
                   settings: SolverSettings | None = None) -> CheckResult:
    """Membership of consecutive pairs and the sup-norm decay of the gap to ``y_s``."""
    t0 = time.perf_counter()
    ys = contraction_sequence(synth, steps)
    block = f_membership_block(model, next_state=True)
    failed = [k for k in range(steps)
              if f_membership_feasible(model, ys[k], ys[k + 1], settings, block=block) is None]
    gap0 = float(np.max(np.abs(synth.sigma - synth.y_s)))
    decay = max(abs(float(np.max(np.abs(ys[k] - synth.y_s))) - synth.gamma ** k * gap0)
                for k in range(steps + 1))
    decay_tol = 8 * np.finfo(float).eps * (1.0 + float(np.max(np.abs(ys))))
    ok = not failed and decay <= decay_tol
    detail = (f"{steps} transitions, gamma {synth.gamma:.6g}, "
              f"{'all members' if not failed else f'non-members at k={failed}'}, decay error {decay:.1e}")
    return CheckResult("contraction-sequence", ok, detail, time.perf_counter() - t0)


def descent_check(model: TubeModel, cost: StageCost, synth: SynthesisData, count: int = 100,
                  seed: int = 0, tol: float = 1e-6, zero_tol: float = 1e-9,
                  settings: SolverSettings | None = None) -> CheckResult:
    """Terminal cost vanishes at ``y_s``, is positive elsewhere and decreases.

    The descent inequality ``min_{y+} R(y, y+) + M(y+) <= M(y) + tol`` is
    checked at each sampled parameter.
    """
    t0 = time.perf_counter()
    M_s = terminal_M(model, cost, synth, synth.y_s, settings).value
    ys, Ms = sample_terminal_parameters(model, cost, synth, count, seed, settings=settings)
    worst_desc = -np.inf
    for y, M in zip(ys, Ms):
        D = descent_value(model, cost, synth, y, settings)
        worst_desc = max(worst_desc, D - M)
    min_M = float(np.min(Ms)) if len(Ms) else np.nan
    ok = (abs(M_s) <= zero_tol and len(ys) == count and min_M > 0.0 and worst_desc <= tol)
    detail = (f"M(y_s) {M_s:.1e}, {len(ys)}/{count} samples, min M {min_M:.2e}, "
              f"worst descent excess {worst_desc:.1e}")
    return CheckResult("terminal-descent", ok, detail, time.perf_counter() - t0)


def closed_loop_check(controller_factory, system, cfg: ScenarioConfig, floor: float = 1e-6,
                      residual_tol: float = 1e-7, within: int | None = None) -> CheckResult:
    """Run one scenario and check membership, monotone descent and settling.

    Descent means the Lyapunov value never increases, strictly decreases while
    above ``floor``, and drops by at least the rotated stage cost of each step
    (up to ``floor``).  ``controller_factory()`` must return a fresh
    controller.  Settling means the value reaches ``floor`` within ``within``
    steps (default: the whole run).
    """
    t0 = time.perf_counter()
    name = f"closed-loop seed={cfg.seed} {cfg.disturbance}/{cfg.model}"
    try:
        logs = run_closed_loop(controller_factory(), system, cfg)
    except Exception as exc:    # noqa: BLE001 - reported as a failed check
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0)
    L = np.array([log.lyapunov for log in logs])
    res = max(log.residual for log in logs)
    drop = np.array([log.rotated_stage for log in logs])
    ups = [k for k in range(1, len(L)) if L[k] > L[k - 1] - drop[k - 1] + floor
           or (L[k - 1] > floor and not L[k] < L[k - 1])]
    settled = np.flatnonzero(L <= floor)
    first = int(settled[0]) if settled.size else None
    within = len(L) if within is None else within
    ok = not ups and res <= residual_tol and first is not None and first <= within
    detail = (f"{len(L)} steps, max residual {res:.1e}, "
              f"{'monotone' if not ups else f'increase at k={ups[:5]}'}, "
              f"settled at k={first}")
    return CheckResult(name, ok, detail, time.perf_counter() - t0)


def controller_factory(model, cost, synth, horizon, settings=None):
    return lambda: TubeMPC(model, cost, synth, horizon, settings)
