"""Template polyhedra ``P(Y, y) = {x : Y x <= y}`` and their vertex configurations.

A template is a fixed facet-normal matrix ``Y`` (m x n) together with a seed
parameter ``sigma``.  If ``P(Y, sigma)`` is an entirely simple polytope, its
vertices are indexed by n-subsets ``V_i`` of the facet indices and are
reproduced for every parameter ``y`` by the linear maps
``V_i = inv(Y[V_i]) @ I[V_i]``.  The parameters for which all these points stay
inside ``P(Y, y)`` form the polyhedral cone ``{y : E y <= 0}``; on that cone
``P(Y, y)`` is the convex hull of the points ``V_i y``.

Index sets are zero-based throughout.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .solver import LinearProgram, SolverError, SolverSettings, Status, solve_lp

logger = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class NotEntirelySimple(GeometryError):
    def __init__(self, message, vertex=None, rows=None):
        super().__init__(message)
        self.vertex = vertex
        self.rows = rows


class UnboundedTemplate(GeometryError):
    pass


class EmptyPolytope(GeometryError):
    pass


class AngleSpacingError(GeometryError):
    pass


class ConfigurationViolated(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class Template:
    """Facet normals ``Y`` and seed parameter ``sigma``."""

    Y: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if sigma.size != Y.shape[0]:
            raise GeometryError(f"sigma has {sigma.size} entries for {Y.shape[0]} facets")
        if np.any(np.linalg.norm(Y, axis=1) == 0.0):
            raise GeometryError("template has a zero row")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(sigma))):
            raise GeometryError("template data must be finite")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "sigma", sigma)

    @property
    def m(self) -> int:
        return self.Y.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    def with_sigma(self, sigma) -> "Template":
        return Template(self.Y, sigma)

    def check_bounded(self, settings: SolverSettings | None = None) -> None:
        """Raise unless ``P(Y, sigma)`` is nonempty and bounded (2n LPs)."""
        if not face_nonempty(self, self.sigma, (), settings):
            raise EmptyPolytope("P(Y, sigma) is empty")
        for k in range(self.n):
            for sign in (1.0, -1.0):
                c = np.zeros(self.n)
                c[k] = -sign
                res = solve_lp(LinearProgram(c, self.Y, self.sigma), settings)
                if res.status is Status.UNBOUNDED:
                    raise UnboundedTemplate(f"P(Y, sigma) is unbounded along {'+' if sign > 0 else '-'}e{k}")
                if not res.ok:
                    raise SolverError(f"boundedness LP along e{k}: {res.status.value}", res)


@dataclass(frozen=True, eq=False)
class VertexConfiguration:
    """Vertex index sets, vertex maps and the conic configuration constraint."""

    vertex_sets: tuple[tuple[int, ...], ...]
    maps: np.ndarray            # (mbar, n, m)
    E_raw: np.ndarray           # (mbar*m, m), or the closed form when built in 2-D
    E: np.ndarray               # reduced rows, (m_E, m)
    sigma: np.ndarray           # seed the configuration was enumerated at
    info: dict = field(default_factory=dict)

    @property
    def mbar(self) -> int:
        return len(self.vertex_sets)

    @property
    def m(self) -> int:
        return self.maps.shape[2]

    @property
    def n(self) -> int:
        return self.maps.shape[1]

    @property
    def m_E(self) -> int:
        return self.E.shape[0]

    def vertices(self, y) -> np.ndarray:
        """The points ``V_i y`` stacked as an (mbar, n) array."""
        return self.maps @ np.asarray(y, dtype=float)

    def cone_tol(self, y) -> float:
        return 1e-9 * (1.0 + float(np.max(np.abs(y), initial=0.0)))

    def in_cone(self, y, tol: float | None = None) -> bool:
        y = np.asarray(y, dtype=float)
        tol = self.cone_tol(y) if tol is None else tol
        return bool(np.all(self.E @ y <= tol))


@dataclass(frozen=True, eq=False)
class ConfiguredPolytope:
    template: Template
    config: VertexConfiguration
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        object.__setattr__(self, "y", y)
        if not self.config.in_cone(y):
            viol = float(np.max(self.config.E @ y))
            raise ConfigurationViolated(f"E y <= 0 violated by {viol:.3g}")


@dataclass(frozen=True)
class SimplicityReport:
    passed: bool
    offending: tuple[tuple[int, ...], ...] = ()
    points: tuple[tuple[float, ...], ...] = ()


def active_tol(y) -> float:
    return 1e-9 * (1.0 + float(np.max(np.abs(y), initial=0.0)))


# ---------------------------------------------------------------------------
# Faces


def face_nonempty(t: Template, y, I=(), settings: SolverSettings | None = None) -> bool:
    """True iff the face ``{x in P(Y, y) : Y_I x >= y_I}`` is nonempty."""
    y = np.asarray(y, dtype=float)
    I = sorted(set(int(i) for i in I))
    if any(i < 0 or i >= t.m for i in I):
        raise GeometryError(f"face index set {I} out of range for m={t.m}")
    rest = [i for i in range(t.m) if i not in I]
    lp = LinearProgram(np.zeros(t.n), t.Y[rest], y[rest],
                       t.Y[I] if I else None, y[I] if I else None)
    res = solve_lp(lp, settings)
    if res.status is Status.OPTIMAL:
        return True
    if res.status is Status.INFEASIBLE:
        return False
    raise SolverError(f"face LP for I={I}: {res.status.value}", res)


# ---------------------------------------------------------------------------
# Vertex enumeration


def _candidate_vertices(Y, y, chunk=200_000):
    """Yield ``(subsets, points)`` for all invertible n-subsets, in lexicographic order."""
    m, n = Y.shape
    norms = np.linalg.norm(Y, axis=1)
    it = itertools.combinations(range(m), n)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        idx = np.asarray(block, dtype=np.int64)
        M = Y[idx]
        det = np.abs(np.linalg.det(M)) / np.prod(norms[idx], axis=1)
        ok = det > 1e-10
        idx, M = idx[ok], M[ok]
        if not len(idx):
            continue
        pts = np.linalg.solve(M, y[idx][..., None])[..., 0]
        yield idx, pts


def _vertex_scan(Y, sigma):
    """Return kept subsets, and feasible points whose active set exceeds n."""
    m, n = Y.shape
    tol = active_tol(sigma)
    kept = []
    degenerate = {}
    for idx, pts in _candidate_vertices(Y, sigma):
        r = pts @ Y.T - sigma
        feas = np.all(r <= tol, axis=1)
        act = np.abs(r) <= tol
        count = act.sum(axis=1)
        for k in np.flatnonzero(feas & (count == n)):
            kept.append(tuple(int(i) for i in idx[k]))
        for k in np.flatnonzero(feas & (count > n)):
            rows = tuple(int(i) for i in np.flatnonzero(act[k]))
            degenerate.setdefault(rows, pts[k])
    return kept, degenerate


def vertex_maps(Y, vertex_sets) -> np.ndarray:
    m, n = Y.shape
    maps = np.zeros((len(vertex_sets), n, m))
    for i, I in enumerate(vertex_sets):
        maps[i][:, list(I)] = np.linalg.inv(Y[list(I)])
    return maps


def conic_matrix(Y, maps) -> np.ndarray:
    """Stack the blocks ``Y V_i - I``; block i of ``E y <= 0`` says ``V_i y`` lies in ``P(Y, y)``."""
    m = Y.shape[0]
    blocks = [Y @ V - np.eye(m) for V in maps]
    E = np.vstack(blocks) if blocks else np.zeros((0, m))
    # Entries that are zero in exact arithmetic come out at roundoff level.
    E[np.abs(E) < 1e-12] = 0.0
    return E


def check_entirely_simple(t: Template) -> SimplicityReport:
    """Vertex-level simplicity check of ``P(Y, sigma)``.

    Every vertex must have exactly n active facets with a full-rank normal
    matrix.  The offending active index sets are reported as witnesses.
    """
    _, degenerate = _vertex_scan(t.Y, t.sigma)
    if not degenerate:
        return SimplicityReport(True)
    rows = tuple(sorted(degenerate))
    pts = tuple(tuple(float(v) for v in degenerate[r]) for r in rows)
    return SimplicityReport(False, rows, pts)


def enumerate_vertex_configuration(
    t: Template,
    settings: SolverSettings | None = None,
    *,
    perturb: bool = False,
    seed: int = 0,
    max_retries: int = 5,
    reduce: bool = True,
) -> VertexConfiguration:
    """Enumerate the vertices of ``P(Y, sigma)`` and build ``V_i`` and ``E``.

    With ``perturb=True`` a seed that is not entirely simple is retried with
    ``sigma + U(0, 1e-6 ||sigma||_inf)`` noise, at most ``max_retries`` times.
    """
    t.check_bounded(settings)
    sigma = t.sigma.copy()
    rng = np.random.default_rng(seed)
    attempts = 0
    while True:
        kept, degenerate = _vertex_scan(t.Y, sigma)
        if not degenerate:
            break
        if not perturb or attempts >= max_retries:
            rows = sorted(degenerate)[0]
            raise NotEntirelySimple(
                f"vertex {np.round(degenerate[rows], 12).tolist()} has {len(rows)} active facets "
                f"{list(rows)} (n={t.n})", degenerate[rows], rows)
        attempts += 1
        sigma = t.sigma + rng.uniform(0.0, 1e-6 * np.max(np.abs(t.sigma)), t.m)
        logger.info("seed not entirely simple; perturbation attempt %d", attempts)
    if not kept:
        raise EmptyPolytope("P(Y, sigma) has no vertices")
    vertex_sets = tuple(kept)
    maps = vertex_maps(t.Y, vertex_sets)
    E_raw = conic_matrix(t.Y, maps)
    info = {"perturbations": attempts}
    if reduce:
        E, kept_rows = reduce_conic_rows(E_raw, settings, core=edge_rows(vertex_sets, t.m))
        info["kept_rows"] = kept_rows
    else:
        E = E_raw
    return VertexConfiguration(vertex_sets, maps, E_raw, E, sigma, info)


def edge_rows(vertex_sets, m: int) -> list[int]:
    """Rows of ``E_raw`` that encode nonnegative edge lengths.

    Two vertices of a simple polytope sharing n-1 facets span an edge.  The
    row saying that one endpoint satisfies the facet the other one lies on is
    collected for both endpoints.  These rows serve as a domination core
    during reduction.
    """
    sets = [frozenset(I) for I in vertex_sets]
    rows = []
    for k, S in enumerate(sets):
        for k2 in range(k + 1, len(sets)):
            S2 = sets[k2]
            if len(S & S2) == len(S) - 1:
                (b,) = tuple(S2 - S)
                (a,) = tuple(S - S2)
                rows.extend((k * m + b, k2 * m + a))
    return sorted(rows)


# ---------------------------------------------------------------------------
# Redundancy removal


def _dominance_value(e, E_keep, settings) -> float:
    """``max e.y s.t. E_keep y <= 0, ||y||_inf <= 1``."""
    m = e.size
    lp = LinearProgram(-e, E_keep if E_keep.shape[0] else None,
                       np.zeros(E_keep.shape[0]) if E_keep.shape[0] else None,
                       lb=-np.ones(m), ub=np.ones(m))
    res = solve_lp(lp, settings)
    if not res.ok:
        raise SolverError(f"dominance LP: {res.status.value}", res)
    return -res.objective


def _nnls_dominated(e, E_keep, tol) -> bool:
    if not E_keep.shape[0]:
        return False
    _, resid = nnls(E_keep.T, e, maxiter=50 * E_keep.shape[0])
    # With e = E_keep^T mu + r and mu >= 0, max over the box is at most ||r||_1.
    return resid * math.sqrt(e.size) <= tol


def reduce_conic_rows(E_raw, settings: SolverSettings | None = None, *, core=None,
                      tol: float = 1e-9):
    """Remove rows of ``E_raw`` that are implied by the others on ``{y : E y <= 0}``.

    Rows are scanned in order; row ``e`` is dropped iff
    ``max{e.y : E_keep y <= 0, ||y||_inf <= 1} <= tol`` over the other currently
    retained rows.  Zero rows and positive multiples of earlier rows are
    dropped first.  If ``core`` row indices are given, rows certified to lie
    in the conic hull of the core rows (by nonnegative least squares) are also
    dropped before the scan; the core rows themselves are still scanned.

    Returns ``(E_reduced, kept_indices)``.
    """
    E_raw = np.asarray(E_raw, dtype=float)
    scale = np.max(np.abs(E_raw), axis=1) if E_raw.size else np.zeros(0)
    alive = [i for i in range(E_raw.shape[0]) if scale[i] > 1e-12]
    normalized = {i: E_raw[i] / scale[i] for i in alive}
    seen = set()
    unique = []
    for i in alive:
        key = tuple(np.round(normalized[i], 9))
        if key not in seen:
            seen.add(key)
            unique.append(i)
    if core is not None:
        core_set = [i for i in unique if i in set(core)]
        C = np.array([normalized[i] for i in core_set]).reshape(len(core_set), E_raw.shape[1])
        unique = [i for i in unique
                  if i in set(core_set) or not _nnls_dominated(normalized[i], C, tol)]
    retained = list(unique)
    for i in list(unique):
        others = [j for j in retained if j != i]
        E_keep = np.array([normalized[j] for j in others]).reshape(len(others), E_raw.shape[1])
        if _dominance_value(normalized[i], E_keep, settings) <= tol:
            retained.remove(i)
    kept = sorted(retained)
    return E_raw[kept].copy(), kept


def cone_dominates(E_a, E_b, settings: SolverSettings | None = None, tol: float = 1e-8) -> bool:
    """True iff every row of ``E_b`` is implied by ``E_a y <= 0`` (LP per row)."""
    E_a = np.asarray(E_a, dtype=float)
    E_a = E_a[np.max(np.abs(E_a), axis=1, initial=0.0) > 0.0] if E_a.size else E_a
    E_a_unit = E_a / np.max(np.abs(E_a), axis=1, keepdims=True) if E_a.size else E_a
    for e in np.asarray(E_b, dtype=float):
        s = np.max(np.abs(e))
        if s == 0.0:
            continue
        e = e / s
        if _nnls_dominated(e, E_a_unit, tol * 1e-2):
            continue
        if _dominance_value(e, E_a, settings) > tol:
            return False
    return True


def cones_equal(E_a, E_b, settings: SolverSettings | None = None, tol: float = 1e-8) -> bool:
    return cone_dominates(E_a, E_b, settings, tol) and cone_dominates(E_b, E_a, settings, tol)


# ---------------------------------------------------------------------------
# Closed-form 2-D templates


def _check_angles(phi):
    phi = np.asarray(phi, dtype=float).reshape(-1)
    m = phi.size
    if m < 3:
        raise AngleSpacingError("need at least three angles")
    if np.any(phi < 0) or np.any(phi >= 2 * np.pi):
        raise AngleSpacingError("angles must lie in [0, 2pi)")
    gaps = np.diff(phi)
    if np.any(gaps <= 0):
        raise AngleSpacingError("angles must be strictly increasing")
    if np.any(gaps >= np.pi):
        raise AngleSpacingError("consecutive angles must differ by less than pi")
    if phi[-1] - phi[0] <= np.pi:
        raise AngleSpacingError("angles must span more than pi")
    return phi


def build_template_2d(angles) -> tuple[Template, VertexConfiguration]:
    """Planar template with normals ``[cos phi_i, sin phi_i]`` and ``sigma = 1``.

    Vertices are the neighbouring facet pairs ``{i, i+1}`` and the cone matrix
    is the banded closed form with ``Delta_i = -sin(phi_{i+1} - phi_i)`` and
    ``Sigma_i = sin(phi_{i+2} - phi_i)``: row k has ``Delta_{k+1}``,
    ``Sigma_k``, ``Delta_k`` in columns k, k+1, k+2 (cyclically).
    """
    phi = _check_angles(angles)
    m = phi.size
    Y = np.column_stack([np.cos(phi), np.sin(phi)])
    t = Template(Y, np.ones(m))
    ext = np.concatenate([phi, phi[:2] + 2 * np.pi])
    delta = -np.sin(ext[1:m + 1] - ext[:m])
    big_sigma = np.sin(ext[2:m + 2] - ext[:m])
    E = np.zeros((m, m))
    for k in range(m):
        E[k, k] += delta[(k + 1) % m]
        E[k, (k + 1) % m] += big_sigma[k]
        E[k, (k + 2) % m] += delta[k]
    vertex_sets = tuple((i, (i + 1) % m) for i in range(m))
    maps = vertex_maps(Y, vertex_sets)
    vc = VertexConfiguration(vertex_sets, maps, conic_matrix(Y, maps), E, t.sigma.copy(),
                             {"closed_form": True})
    return t, vc


def regular_polygon_angles(m: int) -> np.ndarray:
    return 2 * np.pi * np.arange(m) / m


def grid_template_3d(radius: int = 1) -> Template:
    """Normalized integer directions ``[i, j, k]`` from ``{-r..r}^3 minus 0``, ``sigma = 1``."""
    rng = range(-radius, radius + 1)
    rows = [np.array(v, dtype=float) for v in itertools.product(rng, rng, rng) if any(v)]
    Y = np.array([v / np.linalg.norm(v) for v in rows])
    return Template(Y, np.ones(len(rows)))


# ---------------------------------------------------------------------------
# Points and hulls


def vertices_of(cp: ConfiguredPolytope) -> np.ndarray:
    """All ``mbar`` points ``V_i y`` (duplicates kept, in vertex-set order)."""
    return cp.config.vertices(cp.y)


def hull_distance(x, vertices, settings: SolverSettings | None = None) -> float:
    """``min ||x - sum theta_i v_i||_inf`` over the simplex of weights."""
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    k, n = V.shape
    if k == 0:
        raise GeometryError("empty vertex list")
    # Variables (theta, t): x - V^T theta <= t and V^T theta - x <= t.
    G = np.block([[-V.T, -np.ones((n, 1))], [V.T, -np.ones((n, 1))]])
    h = np.concatenate([-x, x])
    A = np.concatenate([np.ones(k), [0.0]])[None, :]
    c = np.zeros(k + 1)
    c[-1] = 1.0
    lb = np.zeros(k + 1)
    res = solve_lp(LinearProgram(c, G, h, A, [1.0], lb=lb), settings)
    if not res.ok:
        raise SolverError(f"hull LP: {res.status.value}", res)
    return max(float(res.x[-1]), 0.0)


def hull_membership(x, vertices, tol: float = 1e-8, settings: SolverSettings | None = None) -> bool:
    return hull_distance(x, vertices, settings) <= tol


def polytope_vertices(H, h, tol: float = 1e-9) -> np.ndarray:
    """Distinct vertices of a bounded ``{x : H x <= h}`` by enumerating n-subsets of rows.

    Intended for small sets such as disturbance polytopes; degenerate
    vertices are allowed and reported once.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    h = np.asarray(h, dtype=float).reshape(-1)
    n = H.shape[1]
    if n == 0:
        return np.zeros((1, 0))
    out = []
    scale = 1.0 + float(np.max(np.abs(h), initial=0.0))
    for _, pts in _candidate_vertices(H, h):
        feas = np.all(pts @ H.T - h <= tol * scale, axis=1)
        out.extend(pts[feas])
    if not out:
        raise EmptyPolytope("no vertices found; the set is empty or unbounded")
    pts = np.array(out)
    keys = np.round(pts / (tol * scale * 10)).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return pts[np.sort(first)]


def support_parameter(Y, vertices) -> np.ndarray:
    """``y_i = max_v Y_i v``: the tightest template parameter containing the points."""
    V = np.atleast_2d(np.asarray(vertices, dtype=float))
    if V.shape[0] == 0:
        raise GeometryError("empty vertex list")
    return np.max(np.asarray(Y, dtype=float) @ V.T, axis=1)
