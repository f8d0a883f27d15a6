"""Linear systems with polytopic model uncertainty and bounded additive disturbances.

``x+ = A x + B u + C w`` where ``[A, B]`` ranges over the convex hull of the
model vertices ``[A_j, B_j]`` and ``w`` lies in the polytope ``W``.  State and
input constraints ``X`` and ``U`` are H-polyhedra; ``X`` may have no rows.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .solver import LinearProgram, SolverSettings, Status, solve_lp


class UnboundedDisturbanceSet(ValueError):
    pass


class SystemDataError(ValueError):
    """Inconsistent system data."""


@dataclass(frozen=True, eq=False)
class Polyhedron:
    """``{x : H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(-1)
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2:
            raise SystemDataError("H must be a matrix")
        if H.shape[0] != h.size:
            raise SystemDataError(f"H has {H.shape[0]} rows but h has {h.size} entries")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise SystemDataError("polyhedron data must be finite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @classmethod
    def box(cls, lo, hi) -> "Polyhedron":
        lo = np.asarray(lo, dtype=float).reshape(-1)
        hi = np.asarray(hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise SystemDataError("box bounds must satisfy lo <= hi")
        eye = np.eye(lo.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @classmethod
    def whole_space(cls, dim: int) -> "Polyhedron":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def rows(self) -> int:
        return self.H.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.H @ np.asarray(x, dtype=float) <= self.h + tol))

    def box_bounds(self):
        """``(lo, hi)`` if this is exactly an axis-aligned box in ``[I; -I]`` form, else None."""
        d = self.dim
        if self.rows != 2 * d:
            return None
        eye = np.eye(d)
        if not np.array_equal(self.H, np.vstack([eye, -eye])):
            return None
        hi, lo = self.h[:d], -self.h[d:]
        if np.any(lo > hi):
            return None
        return lo, hi

    def support(self, direction, settings: SolverSettings | None = None) -> float:
        """``max direction.x`` over the polyhedron; ``inf`` if unbounded."""
        direction = np.asarray(direction, dtype=float)
        box = self.box_bounds()
        if box is not None:
            lo, hi = box
            return float(direction @ ((lo + hi) / 2) + np.abs(direction) @ ((hi - lo) / 2))
        res = solve_lp(LinearProgram(-direction, self.H, self.h), settings)
        if res.status is Status.UNBOUNDED:
            return np.inf
        if not res.ok:
            raise ValueError(f"support LP: {res.status.value}")
        return -res.objective

    def is_bounded(self, settings: SolverSettings | None = None) -> bool:
        if self.rows == 0:
            return self.dim == 0
        for k in range(self.dim):
            for sign in (1.0, -1.0):
                e = np.zeros(self.dim)
                e[k] = sign
                res = solve_lp(LinearProgram(-e, self.H, self.h), settings)
                if res.status is Status.UNBOUNDED:
                    return False
                if res.status is Status.INFEASIBLE:
                    return True
                if not res.ok:
                    raise ValueError(f"boundedness LP: {res.status.value}")
        return True

    def box_vertices(self) -> np.ndarray:
        """All corners of a box polyhedron (duplicates removed for flat axes)."""
        box = self.box_bounds()
        if box is None:
            raise SystemDataError("vertex form is only available for box polyhedra")
        lo, hi = box
        corners = {tuple(c) for c in itertools.product(*zip(lo, hi))}
        return np.array(sorted(corners))

    def to_json(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_json(cls, data, dim: int) -> "Polyhedron":
        H = np.asarray(data["H"], dtype=float)
        if H.size == 0:
            H = H.reshape(0, dim)
        return cls(H, data["h"])


@dataclass(frozen=True, eq=False)
class UncertainSystem:
    A_vertices: np.ndarray      # (l, nx, nx)
    B_vertices: np.ndarray      # (l, nx, nu)
    C: np.ndarray               # (nx, nw)
    W: Polyhedron
    X: Polyhedron
    U: Polyhedron

    def __post_init__(self):
        A = np.asarray(self.A_vertices, dtype=float)
        B = np.asarray(self.B_vertices, dtype=float)
        if A.ndim == 2:
            A = A[None]
        if B.ndim == 2:
            B = B[None]
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "A_vertices", A)
        object.__setattr__(self, "B_vertices", B)
        object.__setattr__(self, "C", C)

    @property
    def nx(self) -> int:
        return self.A_vertices.shape[1]

    @property
    def nu(self) -> int:
        return self.B_vertices.shape[2]

    @property
    def nw(self) -> int:
        return self.C.shape[1]

    @property
    def l(self) -> int:
        return self.A_vertices.shape[0]

    @classmethod
    def lti(cls, A, B, C, W, X, U) -> "UncertainSystem":
        return cls(np.asarray(A, dtype=float)[None], np.asarray(B, dtype=float)[None], C, W, X, U)

    def to_json(self) -> dict:
        return {
            "A_vertices": self.A_vertices.tolist(),
            "B_vertices": self.B_vertices.tolist(),
            "C": self.C.tolist(),
            "W": self.W.to_json(),
            "X": self.X.to_json(),
            "U": self.U.to_json(),
        }

    @classmethod
    def from_json(cls, data) -> "UncertainSystem":
        A = np.asarray(data["A_vertices"], dtype=float)
        B = np.asarray(data["B_vertices"], dtype=float)
        C = np.atleast_2d(np.asarray(data["C"], dtype=float))
        nx = A.shape[-1]
        nu = B.shape[-1]
        return cls(A, B, C, Polyhedron.from_json(data["W"], C.shape[1]),
                   Polyhedron.from_json(data["X"], nx), Polyhedron.from_json(data["U"], nu))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...] = ()


def validate_system(sys: UncertainSystem, settings: SolverSettings | None = None) -> ValidationReport:
    """Dimension and boundedness checks; never raises on bad data."""
    out = []
    A, B, C = sys.A_vertices, sys.B_vertices, sys.C
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        out.append(f"A_vertices must be square matrices, got shape {A.shape}")
    if B.ndim != 3:
        out.append(f"B_vertices must be matrices, got shape {B.shape}")
    if A.shape[0] < 1:
        out.append("need at least one model vertex")
    if A.ndim == 3 and B.ndim == 3:
        if A.shape[0] != B.shape[0]:
            out.append(f"{A.shape[0]} A vertices but {B.shape[0]} B vertices")
        if B.shape[1] != A.shape[1]:
            out.append(f"B has {B.shape[1]} rows, expected {A.shape[1]}")
    if C.shape[0] != A.shape[-1]:
        out.append(f"C has {C.shape[0]} rows, expected {A.shape[-1]}")
    if sys.W.dim != C.shape[1]:
        out.append(f"W has dimension {sys.W.dim}, C has {C.shape[1]} columns")
    if sys.X.dim != A.shape[-1]:
        out.append(f"X has dimension {sys.X.dim}, expected {A.shape[-1]}")
    if B.ndim == 3 and sys.U.dim != B.shape[-1]:
        out.append(f"U has dimension {sys.U.dim}, expected {B.shape[-1]}")
    if not out:
        if sys.W.rows == 0 and sys.W.dim > 0:
            out.append("W is unbounded")
        elif sys.W.box_bounds() is None:
            try:
                if not sys.W.is_bounded(settings):
                    out.append("W is unbounded")
            except ValueError as exc:
                out.append(f"W boundedness check failed: {exc}")
    return ValidationReport(not out, tuple(out))


def disturbance_support(Y, sys: UncertainSystem, settings: SolverSettings | None = None) -> np.ndarray:
    """``wbar_i = max_{w in W} Y_i C w`` for every template row.

    Box disturbance sets use the closed form; other sets solve one LP per row.
    """
    D = np.asarray(Y, dtype=float) @ sys.C
    box = sys.W.box_bounds()
    if box is not None:
        lo, hi = box
        return D @ ((lo + hi) / 2) + np.abs(D) @ ((hi - lo) / 2)
    if sys.W.rows == 0 and sys.W.dim > 0:
        raise UnboundedDisturbanceSet("W has no constraints")
    out = np.empty(D.shape[0])
    for i, d in enumerate(D):
        val = sys.W.support(d, settings)
        if not np.isfinite(val):
            raise UnboundedDisturbanceSet(f"W is unbounded along template row {i}")
        out[i] = val
    return out
