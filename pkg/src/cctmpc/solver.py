"""LP and convex-QP solving with dual extraction.

Problems are posed as::

    minimize    1/2 z^T H z + c^T z
    subject to  G z <= h
                A z  = b
                lb <= z <= ub

with the Lagrangian ``f(z) + mu^T (G z - h) + nu^T (A z - b)``, so that on an
optimal result ``H z + c + G^T mu + A^T nu = 0`` and ``mu >= 0``.

The reference backend is a dense/sparse Mehrotra predictor-corrector interior
point method.  When it does not converge, the problem is classified with two
auxiliary LPs (an elastic phase-1 problem and a bounded recession-direction
problem) so that ``Infeasible`` is only reported together with a Farkas
certificate.  ``backend="highs"`` routes LPs to :func:`scipy.optimize.linprog`.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls
from scipy.sparse.csgraph import reverse_cuthill_mckee

logger = logging.getLogger(__name__)

__all__ = [
    "Status",
    "SolverSettings",
    "SolveResult",
    "LinearProgram",
    "QuadraticProgram",
    "SolverError",
    "solve_lp",
    "solve_qp",
    "require_optimal",
]

# Above this many (variables + equalities) the sparse factorization path is used.
_DENSE_LIMIT = 500
_CERT_TOL = 1e-9
# Largest half-bandwidth for which the banded Cholesky path is used.
_BAND_LIMIT = 300
# The duality gap is driven this far below comp_tol so that primal iterates are
# accurate to about comp_tol even where strict complementarity fails.
_COMP_MARGIN = 1e-3
# Relative loosening of the constraint rows for the retry of a stalled solve.
_RELAX = 1e-9


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"


class SolverError(RuntimeError):
    """Raised by callers that require an optimal result."""

    def __init__(self, message: str, result: "SolveResult | None" = None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-8
    stat_tol: float = 1e-8
    comp_tol: float = 1e-8
    max_iter: int = 200
    backend: str = "reference"
    polish: bool = True

    def tightened(self, factor: float) -> "SolverSettings":
        return SolverSettings(
            feas_tol=self.feas_tol * factor,
            stat_tol=self.stat_tol * factor,
            comp_tol=self.comp_tol * factor,
            max_iter=self.max_iter,
            backend=self.backend,
            polish=self.polish,
        )


@dataclass
class SolveResult:
    status: Status
    x: np.ndarray | None
    dual_ineq: np.ndarray | None
    dual_eq: np.ndarray | None
    objective: float
    iterations: int = 0
    dual_lb: np.ndarray | None = None
    dual_ub: np.ndarray | None = None
    residuals: dict[str, float] = field(default_factory=dict)
    certificate: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def _as_matrix(M, rows: int | None, cols: int, name: str):
    if M is None:
        return np.zeros((0 if rows is None else rows, cols))
    if sp.issparse(M):
        M = sp.csr_matrix(M, dtype=float)
        if not np.all(np.isfinite(M.data)):
            raise ValueError(f"{name} has non-finite entries")
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.size == 0:
            M = M.reshape(0, cols)
        if not np.all(np.isfinite(M)):
            raise ValueError(f"{name} has non-finite entries")
    if M.shape[1] != cols:
        raise ValueError(f"{name} has {M.shape[1]} columns, expected {cols}")
    return M


def _as_vector(v, size: int, name: str, fill: float = 0.0, finite: bool = True):
    if v is None:
        return np.full(size, fill)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != size:
        raise ValueError(f"{name} has length {v.size}, expected {size}")
    if finite and not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


class LinearProgram:
    """``min c^T z`` subject to ``G z <= h``, ``A z = b`` and optional bounds.

    ``G`` and ``A`` may be dense arrays or scipy sparse matrices.  Bounds may
    contain ``+-inf``.
    """

    def __init__(self, c, G=None, h=None, A=None, b=None, lb=None, ub=None):
        self.c = _as_vector(c, np.size(c), "c")
        n = self.c.size
        self.n = n
        self.G = _as_matrix(G, None, n, "G")
        self.h = _as_vector(h, self.G.shape[0], "h")
        self.A = _as_matrix(A, None, n, "A")
        self.b = _as_vector(b, self.A.shape[0], "b")
        self.lb = _as_vector(lb, n, "lb", fill=-np.inf, finite=False)
        self.ub = _as_vector(ub, n, "ub", fill=np.inf, finite=False)
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise ValueError("bounds contain NaN")

    @property
    def H(self):
        return None


class QuadraticProgram(LinearProgram):
    """``min 1/2 z^T H z + c^T z`` with the constraint blocks of :class:`LinearProgram`.

    ``H`` must be symmetric within 1e-10 and positive semidefinite
    (smallest eigenvalue >= -1e-8 ||H||).
    """

    def __init__(self, H, c, G=None, h=None, A=None, b=None, lb=None, ub=None,
                 check_psd: bool = True):
        super().__init__(c, G, h, A, b, lb, ub)
        n = self.n
        H = _as_matrix(H, n, n, "H")
        if H.shape != (n, n):
            raise ValueError(f"H has shape {H.shape}, expected {(n, n)}")
        asym = H - H.T
        asym_norm = abs(asym).max() if sp.issparse(asym) and asym.nnz else (
            0.0 if sp.issparse(asym) else np.max(np.abs(asym), initial=0.0))
        if asym_norm > 1e-10 * max(1.0, _max_abs(H)):
            raise ValueError(f"H is not symmetric (max asymmetry {asym_norm:.3g})")
        self._H = H
        if check_psd and n:
            lam_min = _min_eigenvalue(H)
            if lam_min < -1e-8 * max(_max_abs(H), 1e-300) * n:
                raise ValueError(f"H is not positive semidefinite (min eigenvalue {lam_min:.3g})")

    @property
    def H(self):
        return self._H


def _max_abs(M) -> float:
    if sp.issparse(M):
        return float(abs(M).max()) if M.nnz else 0.0
    return float(np.max(np.abs(M), initial=0.0))


def _min_eigenvalue(H) -> float:
    Hd = H.toarray() if sp.issparse(H) else H
    if Hd.shape[0] <= 800:
        return float(np.linalg.eigvalsh(0.5 * (Hd + Hd.T))[0])
    # Large: a shifted Cholesky succeeds iff H + shift*I is PD.
    shift = 1e-8 * max(_max_abs(Hd), 1e-300) * Hd.shape[0]
    try:
        np.linalg.cholesky(Hd + shift * np.eye(Hd.shape[0]))
        return 0.0
    except np.linalg.LinAlgError:
        return float(spla.eigsh(sp.csr_matrix(Hd), k=1, which="SA", return_eigenvectors=False)[0])


# ---------------------------------------------------------------------------
# Public entry points


def solve_lp(lp: LinearProgram, settings: SolverSettings | None = None, x0=None) -> SolveResult:
    settings = settings or SolverSettings()
    if settings.backend == "highs":
        return _solve_lp_highs(lp)
    if settings.backend != "reference":
        raise ValueError(f"unknown solver backend {settings.backend!r}")
    return _solve(lp, None, settings, x0)


def solve_qp(qp: QuadraticProgram, settings: SolverSettings | None = None, x0=None) -> SolveResult:
    settings = settings or SolverSettings()
    if settings.backend not in ("reference", "highs"):
        raise ValueError(f"unknown solver backend {settings.backend!r}")
    H = qp.H
    if H is not None and _max_abs(H) == 0.0 and settings.backend == "highs":
        return _solve_lp_highs(qp)
    # HiGHS in scipy has no QP interface; QPs always use the reference method.
    return _solve(qp, H, settings, x0)


# ---------------------------------------------------------------------------
# Standard-form conversion


def _stack(blocks, sparse: bool):
    blocks = [b for b in blocks if b.shape[0]]
    if not blocks:
        return None
    if sparse:
        return sp.vstack([sp.csr_matrix(b) for b in blocks], format="csr")
    return np.vstack([b.toarray() if sp.issparse(b) else b for b in blocks])


def _solve(prob: LinearProgram, H, settings: SolverSettings, x0) -> SolveResult:
    n = prob.n
    lb_idx = np.flatnonzero(np.isfinite(prob.lb))
    ub_idx = np.flatnonzero(np.isfinite(prob.ub))
    sparse = (n + prob.A.shape[0] > _DENSE_LIMIT) and any(
        sp.issparse(M) for M in (prob.G, prob.A, H) if M is not None)
    eye = sp.identity(n, format="csr") if sparse else np.eye(n)
    G = _stack([prob.G, -eye[lb_idx], eye[ub_idx]], sparse)
    if G is None:
        G = sp.csr_matrix((0, n)) if sparse else np.zeros((0, n))
    h = np.concatenate([prob.h, -prob.lb[lb_idx], prob.ub[ub_idx]])
    A = prob.A
    if sparse:
        A = sp.csr_matrix(A)
        Hm = sp.csr_matrix((n, n)) if H is None else sp.csr_matrix(H)
    else:
        A = A.toarray() if sp.issparse(A) else A
        Hm = np.zeros((n, n)) if H is None else (H.toarray() if sp.issparse(H) else np.asarray(H))
    res = _interior_point(Hm, prob.c, G, h, A, prob.b, settings, x0, sparse)
    if res.status is Status.NUMERICAL_FAILURE and settings.polish and G.shape[0]:
        # Feasible sets without interior make the multipliers diverge; a
        # slightly loosened problem has an interior and is polished back.
        retry = _interior_point(Hm, prob.c, G, h, A, prob.b, settings, None, sparse, relax=_RELAX)
        if retry.status is Status.OPTIMAL:
            logger.debug("recovered through a loosened problem")
            res = retry
    if res.status is Status.NUMERICAL_FAILURE:
        res = _classify(Hm, prob.c, G, h, A, prob.b, settings, sparse, res)
    p0 = prob.G.shape[0]
    k = lb_idx.size
    if res.dual_ineq is not None:
        full = res.dual_ineq
        res.dual_lb = np.zeros(n)
        res.dual_ub = np.zeros(n)
        res.dual_lb[lb_idx] = full[p0:p0 + k]
        res.dual_ub[ub_idx] = full[p0 + k:]
        res.dual_ineq = full[:p0]
    return res


# ---------------------------------------------------------------------------
# Interior point core


def _row_scale(M, sparse: bool) -> np.ndarray:
    if M.shape[0] == 0:
        return np.ones(0)
    if sparse:
        norms = np.asarray(abs(M).max(axis=1).todense()).reshape(-1)
    else:
        norms = np.max(np.abs(M), axis=1)
    norms[norms == 0.0] = 1.0
    return 1.0 / norms


def _diag_scale(M, d, sparse: bool):
    if sparse:
        return sp.diags(d) @ M
    return M * d[:, None]


def _norm_inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _quasidefinite_lu(M):
    """Sparse LU of a regularized (quasi-definite) KKT matrix.

    Such matrices factor stably under any symmetric ordering, so diagonal
    pivots are used first; that keeps fill close to a Cholesky factor.
    Ordinary threshold pivoting is the fallback.
    """
    try:
        lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
        if np.all(np.isfinite(lu.U.diagonal())) and np.all(lu.U.diagonal() != 0.0):
            return lu
    except RuntimeError:
        pass
    return spla.splu(M, permc_spec="MMD_AT_PLUS_A")


class _KKTSolver:
    """Factorizes ``[H + G^T W G + dI, A^T; A, -dI]`` and solves with refinement.

    Sparse problems without equalities whose normal matrix has a small
    bandwidth after reverse Cuthill-McKee reordering (block-banded horizon
    problems) use a banded Cholesky factorization; other sparse problems use
    SuperLU.  Exactly singular factorizations are retried with a larger
    regularization.
    """

    def __init__(self, H, G, Gt, W, A, sparse: bool, reg: float, cache: dict | None = None):
        n = H.shape[0]
        q = A.shape[0]
        self.n, self.q = n, q
        cache = {} if cache is None else cache
        if sparse:
            K = (H + Gt @ sp.diags(W) @ G).tocsc()
            self._K0 = sp.bmat([[K, A.T], [A, None]], format="csc") if q else K
            if not q and self._banded(K, reg, cache):
                return
            for attempt in range(4):
                reg_diag = np.concatenate([np.full(n, reg), np.full(q, -reg)])
                M = (self._K0 + sp.diags(reg_diag)).tocsc()
                try:
                    lu = _quasidefinite_lu(M)
                    break
                except RuntimeError:
                    if attempt == 3:
                        raise
                    reg = max(reg * 1e3, 1e-15 * _norm_inf(K.diagonal()))
            self._solve = lu.solve
        else:
            K = H + (Gt * W) @ G
            self._K0 = np.block([[K, A.T], [A, np.zeros((q, q))]]) if q else K
            for attempt in range(4):
                M = self._K0.copy()
                M[np.arange(n), np.arange(n)] += reg
                if q:
                    M[np.arange(n, n + q), np.arange(n, n + q)] -= reg
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    lu = sla.lu_factor(M, check_finite=False)
                if np.all(np.diag(lu[0]) != 0.0) or attempt == 3:
                    break
                reg = max(reg * 1e3, 1e-15 * _norm_inf(np.diag(K)))
            self._solve = lambda r: sla.lu_solve(lu, r, check_finite=False)

    def _banded(self, K, reg, cache) -> bool:
        if "perm" not in cache:
            pattern = (abs(K) + sp.identity(K.shape[0])).tocsr()
            perm = reverse_cuthill_mckee(pattern, symmetric_mode=True)
            P = pattern[perm][:, perm].tocoo()
            bw = int(np.max(np.abs(P.row - P.col), initial=0))
            cache["perm"] = perm
            cache["bw"] = bw
            cache["inv"] = np.argsort(perm)
        perm, bw = cache["perm"], cache["bw"]
        n = K.shape[0]
        if bw > _BAND_LIMIT or bw * 4 > n:
            return False
        Kp = K[perm][:, perm].tocoo()
        upper = Kp.row <= Kp.col
        ab = np.zeros((bw + 1, n))
        ab[bw + Kp.row[upper] - Kp.col[upper], Kp.col[upper]] = Kp.data[upper]
        ab[bw] += reg
        try:
            cb = sla.cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            return False
        inv = cache["inv"]

        def solve(r):
            return sla.cho_solve_banded((cb, False), r[perm], check_finite=False)[inv]

        self._solve = solve
        return True

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._solve(rhs)
        for _ in range(2):
            r = rhs - self._K0 @ x
            if not np.all(np.isfinite(r)):
                break
            x = x + self._solve(r)
        return x


def _interior_point(H, c, G, h, A, b, settings: SolverSettings, x0, sparse: bool,
                    relax: float = 0.0) -> SolveResult:
    # Diverging iterates overflow on the way to a failure status; the
    # non-finite values are detected and classified, so the warnings are noise.
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return _interior_point_impl(H, c, G, h, A, b, settings, x0, sparse, relax)


def _interior_point_impl(H, c, G, h, A, b, settings: SolverSettings, x0, sparse: bool,
                         relax: float = 0.0) -> SolveResult:
    """Mehrotra predictor-corrector method on the row- and objective-scaled problem.

    With ``relax > 0`` the scaled right-hand side is loosened by
    ``relax (1 + |h|)`` to create an interior, and the result only counts as
    optimal if polishing against the original rows succeeds.
    """
    n = c.size
    p = G.shape[0]
    q = A.shape[0]

    # Row equilibration of constraint blocks and scaling of the objective.
    dg = _row_scale(G, sparse)
    da = _row_scale(A, sparse)
    Gs = _diag_scale(G, dg, sparse)
    h_orig = h * dg
    hs = h_orig + relax * (1.0 + np.abs(h_orig))
    As = _diag_scale(A, da, sparse) if q else A
    bs = b * da
    obj_scale = max(1.0, _norm_inf(c), _max_abs(H))
    Hs = H / obj_scale
    cs = c / obj_scale
    Gt = Gs.T.tocsr() if sparse else Gs.T
    At = As.T.tocsr() if sparse else As.T

    def objective(z):
        return float(0.5 * z @ (H @ z) + c @ z)

    if p == 0:
        return _equality_qp(H, c, A, b, settings, sparse)

    kkt_cache: dict = {}
    # Initial point: regularized least-squares fit of G z ~ h under A z = b.
    reg = 1e-10
    if x0 is not None:
        z = np.asarray(x0, dtype=float).reshape(n).copy()
        nu = np.zeros(q)
    else:
        kkt = _KKTSolver(Hs, Gs, Gt, np.ones(p), As, sparse, max(reg, 1e-8), kkt_cache)
        sol = kkt.solve(np.concatenate([-cs + Gt @ hs, bs]))
        z, nu = sol[:n], sol[n:]
    s = hs - Gs @ z
    lam = np.ones(p)
    ds_shift = max(-1.5 * s.min(), 0.0)
    s = s + ds_shift
    s = np.maximum(s, 1e-2)
    gap = s @ lam
    s = s + 0.5 * gap / lam.sum()
    lam = lam + 0.5 * gap / s.sum()

    nh = max(_norm_inf(hs), _norm_inf(bs))
    nc = _norm_inf(cs)
    last_dz = None
    status = Status.NUMERICAL_FAILURE
    loose = None  # last iterate meeting the tolerances without the gap margin
    best, best_merit = None, np.inf  # polishing candidate if the method stalls
    it = 0
    for it in range(1, settings.max_iter + 1):
        rd = Hs @ z + cs + Gt @ lam + (At @ nu if q else 0.0)
        re = As @ z - bs if q else np.zeros(0)
        ri = Gs @ z + s - hs
        mu = (s @ lam) / p
        pres = max(_norm_inf(ri), _norm_inf(re))
        dres = _norm_inf(rd)
        pobj = 0.5 * z @ (Hs @ z) + cs @ z
        if not (np.all(np.isfinite(z)) and np.isfinite(mu)):
            break
        logger.debug("it %d pres %.2e dres %.2e gap %.2e pobj %.6e", it, pres, dres, s @ lam, pobj)
        merit = max(pres / (settings.feas_tol * (1.0 + nh)), dres / (settings.stat_tol * (1.0 + nc)),
                    s @ lam / (settings.comp_tol * (1.0 + abs(pobj))))
        if merit < best_merit:
            best, best_merit = (z.copy(), s.copy(), lam.copy(), nu.copy()), merit
        if (pres <= settings.feas_tol * (1.0 + nh)
                and dres <= settings.stat_tol * (1.0 + nc)
                and s @ lam <= settings.comp_tol * (1.0 + abs(pobj))):
            loose = (z.copy(), lam.copy(), nu.copy())
            if s @ lam <= _COMP_MARGIN * settings.comp_tol * (1.0 + abs(pobj)):
                status = Status.OPTIMAL
                break
        # Farkas certificate: G^T lam + A^T nu ~ 0, h^T lam + b^T nu < 0.
        if pres > settings.feas_tol * (1.0 + nh):
            t = hs @ lam + (bs @ nu if q else 0.0)
            if t < 0:
                g = Gt @ lam + (At @ nu if q else 0.0)
                if _norm_inf(g) <= _CERT_TOL * abs(t):
                    return _infeasible_result(lam * dg, nu * da, it)
        # Recession direction along the last step.
        if last_dz is not None and pres <= settings.feas_tol * (1.0 + nh):
            cd = cs @ last_dz
            if cd < 0 and _is_recession(Hs, Gs, As, last_dz, abs(cd), q):
                return SolveResult(Status.UNBOUNDED, None, None, None, -np.inf, it,
                                   certificate=last_dz)

        W = lam / s

        def direction(kkt, rc):
            rhs_z = -rd - Gt @ ((lam * ri - rc) / s)
            sol = kkt.solve(np.concatenate([rhs_z, -re]))
            dz, dnu = sol[:n], sol[n:]
            ds = -ri - Gs @ dz
            dlam = (-rc - lam * ds) / s
            return dz, ds, dlam, dnu

        # A collapsing step signals an inaccurate direction from a nearly
        # singular system; retry with a larger regularization.
        step_reg = reg
        failed = None
        for attempt in range(4):
            try:
                kkt = _KKTSolver(Hs, Gs, Gt, W, As, sparse, step_reg, kkt_cache)
            except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
                failed = f"factorization failed ({exc})"
                break
            # Predictor (affine scaling) step.
            dz_a, ds_a, dl_a, _ = direction(kkt, s * lam)
            a_aff = min(_max_step(s, ds_a), _max_step(lam, dl_a), 1.0)
            mu_aff = ((s + a_aff * ds_a) @ (lam + a_aff * dl_a)) / p
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # Corrector step.
            dz, ds, dlam, dnu = direction(kkt, s * lam + ds_a * dl_a - sigma * mu)
            if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(dlam))):
                failed = "non-finite search direction"
            else:
                alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(lam, dlam)))
                failed = None if alpha >= 1e-8 else f"step length {alpha:.2e}"
            if failed is None:
                break
            step_reg = max(step_reg * 1e3, 1e-9)
        if failed is not None:
            logger.debug("stop: %s", failed)
            break
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam
        nu = nu + alpha * dnu
        s = np.maximum(s, 1e-300)
        lam = np.maximum(lam, 1e-300)
        last_dz = dz

    if status is not Status.OPTIMAL and loose is not None:
        z, lam, nu = loose
        status = Status.OPTIMAL
    if relax > 0.0:
        polished = None
        if status is Status.OPTIMAL:
            polished = _polish(Hs, cs, Gs, Gt, h_orig, As, bs, z, h_orig - Gs @ z, lam, nu,
                               settings, nh, nc, compare=False)
        status = Status.NUMERICAL_FAILURE
        if polished is not None:
            z, lam, nu = polished
            status = Status.OPTIMAL
    elif status is Status.OPTIMAL and settings.polish:
        polished = _polish(Hs, cs, Gs, Gt, hs, As, bs, z, s, lam, nu, settings, nh, nc,
                           repair=False)
        if polished is not None:
            z, lam, nu = polished
    elif settings.polish and best is not None and best_merit < 1e4:
        # Stalled close to a solution, typically because the feasible set has
        # no interior and the multipliers diverge.
        polished = _polish(Hs, cs, Gs, Gt, hs, As, bs, *best, settings, nh, nc)
        if polished is not None:
            logger.debug("recovered by polishing (merit %.2e)", best_merit)
            z, lam, nu = polished
            status = Status.OPTIMAL
    # Unscale.
    lam_u = lam * dg * obj_scale
    nu_u = nu * da * obj_scale if q else np.zeros(0)
    residuals = _residuals(H, c, G, h, A, b, z, lam_u, nu_u)
    if status is not Status.OPTIMAL:
        res = SolveResult(Status.NUMERICAL_FAILURE, z, lam_u, nu_u, objective(z), it,
                          residuals=residuals)
        return res
    return SolveResult(Status.OPTIMAL, z, lam_u, nu_u, objective(z), it, residuals=residuals)


def _polish(H, c, G, Gt, h, A, b, z, s, lam, nu, settings, nh, nc, rounds: int = 6,
            compare: bool = True, repair: bool = True):
    """Re-solve with the identified active rows as equalities.

    Where strict complementarity fails an interior point iterate is only
    accurate to about the square root of the gap.  Treating rows with
    ``lam >= s`` as equalities and solving the KKT system by proximally
    regularized iterative refinement (started at the iterate, so rank
    deficient systems settle near it) recovers full accuracy.  Violated rows
    are added and rows with negative multipliers dropped for a few rounds.
    Returns None unless the result is feasible, dual feasible, stationary and
    no worse than the iterate (the last check is skipped with ``compare=False``,
    for iterates of a loosened problem whose objective is not comparable).
    ``repair`` allows a dense NNLS multiplier fix; it is skipped when the
    iterate is already acceptable because it is costly on long horizons.
    """
    n, q = z.size, A.shape[0]
    active = lam >= s
    if n + int(active.sum()) + q > 20000:
        return None
    Hm = sp.csr_matrix(H)
    Am = sp.csr_matrix(A) if q else sp.csr_matrix((0, n))
    Gm = sp.csr_matrix(G)
    obj = lambda v: 0.5 * v @ (H @ v) + c @ v  # noqa: E731
    feas = settings.feas_tol * (1.0 + nh) * 1e-2
    lam_start = lam
    for _ in range(rounds):
        act = np.flatnonzero(active)
        k = act.size
        Ga = Gm[act]
        K = sp.bmat([[Hm, Ga.T, Am.T], [Ga, None, None], [Am, None, None]], format="csc")
        delta = 1e-9 * max(1.0, _max_abs(K))
        D = sp.diags(np.concatenate([np.full(n, delta), np.full(k + q, -delta)]))
        try:
            lu = _quasidefinite_lu((K + D).tocsc())
        except RuntimeError:
            return None
        rhs = np.concatenate([-c, h[act], b])
        x = np.concatenate([z, lam_start[act], nu])
        for _ in range(100):
            r = rhs - K @ x
            if not np.all(np.isfinite(r)):
                return None
            if _norm_inf(r) <= 1e-14 * (1.0 + max(nh, nc)):
                break
            x = x + lu.solve(r)
        zp = x[:n]
        lam_p = np.zeros_like(lam)
        lam_p[act] = x[n:n + k]
        nu_p = x[n + k:]
        viol_rows = (G @ zp - h) > feas
        neg = lam_p < -1e-9 * (1.0 + _norm_inf(lam_p))
        if repair and not viol_rows.any() and neg.any():
            # Degenerate duals: the primal point may be right while the
            # refinement picked a multiplier outside the nonnegative orthant.
            fixed = _nonneg_multipliers(Hm, c, Ga, Am, zp)
            if fixed is not None and fixed[2] <= settings.stat_tol * (1.0 + nc) * 1e-1:
                lam_p = np.zeros_like(lam)
                lam_p[act] = fixed[0]
                nu_p = fixed[1]
                neg[:] = False
        if not viol_rows.any() and not neg.any():
            break
        logger.debug("polish round: %d violated rows, %d negative multipliers",
                     int(viol_rows.sum()), int(neg.sum()))
        active = (active | viol_rows) & ~neg
        lam_start = np.where(active, np.maximum(lam_p, 0.0), 0.0)
    else:
        return None
    lam_p = np.maximum(lam_p, 0.0)
    rd = H @ zp + c + Gt @ lam_p + (A.T @ nu_p if q else 0.0)
    viol = np.max(G @ zp - h, initial=0.0)
    eq = _norm_inf(A @ zp - b) if q else 0.0
    if (max(viol, eq) > feas
            or _norm_inf(rd) > settings.stat_tol * (1.0 + nc)
            or (compare and obj(zp) > obj(z) + settings.comp_tol * (1.0 + abs(obj(z))))):
        logger.debug("polish rejected: viol %.2e eq %.2e stat %.2e dobj %.2e", viol, eq,
                     _norm_inf(rd), obj(zp) - obj(z))
        return None
    return zp, lam_p, nu_p


def _nonneg_multipliers(H, c, Ga, A, z):
    """Least-squares multipliers ``lam >= 0``, ``nu`` free for the stationarity residual."""
    n, k, q = z.size, Ga.shape[0], A.shape[0]
    if n * (k + 2 * q) > 4e6:
        return None
    M = np.hstack([Ga.T.toarray(), A.T.toarray(), -A.T.toarray()])
    g = -(H @ z + c)
    try:
        x, resid = nnls(M, g, maxiter=50 * (k + 2 * q + 1))
    except RuntimeError:
        return None
    lam = x[:k]
    nu = x[k:k + q] - x[k + q:]
    return lam, nu, _norm_inf(M @ x - g)


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _is_recession(H, G, A, d, scale, q) -> bool:
    tol = _CERT_TOL * scale
    if _norm_inf(H @ d) > tol:
        return False
    if G.shape[0] and np.max(G @ d) > tol:
        return False
    if q and _norm_inf(A @ d) > tol:
        return False
    return True


def _residuals(H, c, G, h, A, b, z, lam, nu) -> dict[str, float]:
    q = A.shape[0]
    rd = H @ z + c + G.T @ lam + (A.T @ nu if q else 0.0)
    slack = h - G @ z
    return {
        "primal_ineq": float(max(np.max(-slack, initial=0.0), 0.0)),
        "primal_eq": _norm_inf(A @ z - b) if q else 0.0,
        "stationarity": _norm_inf(rd),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
        "dual_min": float(np.min(lam, initial=0.0)),
    }


def _infeasible_result(lam, nu, it) -> SolveResult:
    cert = np.concatenate([lam, nu])
    cert = cert / max(_norm_inf(cert), 1e-300)
    return SolveResult(Status.INFEASIBLE, None, None, None, np.inf, it, certificate=cert)


def _equality_qp(H, c, A, b, settings, sparse) -> SolveResult:
    n, q = c.size, A.shape[0]
    Hd = H.toarray() if sp.issparse(H) else H
    Ad = A.toarray() if sp.issparse(A) else A
    K = np.block([[Hd, Ad.T], [Ad, np.zeros((q, q))]]) if q else Hd
    rhs = np.concatenate([-c, b])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    z, nu = sol[:n], sol[n:]
    res = _residuals(Hd, c, np.zeros((0, n)), np.zeros(0), Ad, b, z, np.zeros(0), nu)
    scale = 1.0 + max(_norm_inf(c), _norm_inf(b))
    if res["primal_eq"] > settings.feas_tol * scale:
        cert = np.linalg.lstsq(Ad.T, np.zeros(n), rcond=None)[0] if q else None
        return SolveResult(Status.INFEASIBLE, None, None, None, np.inf, 1, certificate=cert)
    if res["stationarity"] > settings.stat_tol * scale:
        return SolveResult(Status.UNBOUNDED, None, None, None, -np.inf, 1)
    return SolveResult(Status.OPTIMAL, z, np.zeros(0), nu,
                       float(0.5 * z @ Hd @ z + c @ z), 1, residuals=res)


# ---------------------------------------------------------------------------
# Classification of non-converged problems


def _classify(H, c, G, h, A, b, settings, sparse, failed: SolveResult) -> SolveResult:
    n, p, q = c.size, G.shape[0], A.shape[0]
    dg = _row_scale(G, sparse)
    Gs = _diag_scale(G, dg, sparse)
    hs = h * dg
    # Elastic phase 1 over (z, t, e_plus, e_minus):
    #   min t + 1^T (e+ + e-)  s.t.  G z - t <= h,  A z - e+ + e- = b,  t >= -1, e >= 0.
    ones = np.ones((p, 1))
    if sparse:
        G1 = sp.hstack([Gs, sp.csr_matrix(-ones), sp.csr_matrix((p, 2 * q))], format="csr")
        A1 = sp.hstack([A, sp.csr_matrix((q, 1)), -sp.identity(q), sp.identity(q)], format="csr")
    else:
        G1 = np.hstack([Gs, -ones, np.zeros((p, 2 * q))])
        A1 = np.hstack([A, np.zeros((q, 1)), -np.eye(q), np.eye(q)])
    c1 = np.concatenate([np.zeros(n), [1.0], np.ones(2 * q)])
    lb1 = np.concatenate([np.full(n, -np.inf), [-1.0], np.zeros(2 * q)])
    phase1 = LinearProgram(c1, G1, hs, A1 if q else None, b if q else None, lb=lb1)
    relaxed = SolverSettings(feas_tol=settings.feas_tol, stat_tol=settings.stat_tol,
                             comp_tol=settings.comp_tol, max_iter=max(settings.max_iter, 200))
    r1 = _solve_plain(phase1, relaxed, sparse)
    if r1.status is not Status.OPTIMAL:
        logger.debug("phase-1 classification failed: %s", r1.status)
        return failed
    viol = r1.objective
    if viol > 10 * settings.feas_tol * (1.0 + max(_norm_inf(hs), _norm_inf(b))):
        lam = r1.dual_ineq * dg
        nu = r1.dual_eq if q else np.zeros(0)
        cert = np.concatenate([lam, nu])
        cert = cert / max(_norm_inf(cert), 1e-300)
        return SolveResult(Status.INFEASIBLE, None, None, None, np.inf, failed.iterations,
                           certificate=cert)
    # Feasible: look for a descent direction of the recession cone in the unit box.
    Hd = H
    if sparse:
        A2 = sp.vstack([A, sp.csr_matrix(Hd)], format="csr") if q else sp.csr_matrix(Hd)
    else:
        A2 = np.vstack([A, Hd]) if q else Hd
    rec = LinearProgram(c, Gs, np.zeros(p), A2, np.zeros(A2.shape[0]),
                        lb=-np.ones(n), ub=np.ones(n))
    r2 = _solve_plain(rec, relaxed, sparse)
    if r2.status is Status.OPTIMAL and r2.objective < -1e-7 * max(1.0, _norm_inf(c)):
        return SolveResult(Status.UNBOUNDED, None, None, None, -np.inf, failed.iterations,
                           certificate=r2.x)
    return failed


def _solve_plain(lp: LinearProgram, settings: SolverSettings, sparse: bool) -> SolveResult:
    n = lp.n
    lb_idx = np.flatnonzero(np.isfinite(lp.lb))
    ub_idx = np.flatnonzero(np.isfinite(lp.ub))
    eye = sp.identity(n, format="csr") if sparse else np.eye(n)
    G = _stack([lp.G, -eye[lb_idx], eye[ub_idx]], sparse)
    h = np.concatenate([lp.h, -lp.lb[lb_idx], lp.ub[ub_idx]])
    A = sp.csr_matrix(lp.A) if sparse else (lp.A.toarray() if sp.issparse(lp.A) else lp.A)
    H = sp.csr_matrix((n, n)) if sparse else np.zeros((n, n))
    res = _interior_point(H, lp.c, G, h, A, lp.b, settings, None, sparse)
    if res.dual_ineq is not None:
        res.dual_ineq = res.dual_ineq[:lp.G.shape[0]]
    return res


# ---------------------------------------------------------------------------
# Ecosystem adapter


def _solve_lp_highs(lp: LinearProgram) -> SolveResult:
    from scipy.optimize import linprog

    bounds = list(zip(np.where(np.isfinite(lp.lb), lp.lb, None),
                      np.where(np.isfinite(lp.ub), lp.ub, None)))
    kwargs: dict[str, Any] = {"bounds": bounds, "method": "highs"}
    if lp.G.shape[0]:
        kwargs.update(A_ub=lp.G, b_ub=lp.h)
    if lp.A.shape[0]:
        kwargs.update(A_eq=lp.A, b_eq=lp.b)
    out = linprog(lp.c, **kwargs)
    status = {0: Status.OPTIMAL, 2: Status.INFEASIBLE, 3: Status.UNBOUNDED}.get(
        out.status, Status.NUMERICAL_FAILURE)
    if status is not Status.OPTIMAL:
        return SolveResult(status, None, None, None,
                           np.inf if status is Status.INFEASIBLE else -np.inf, out.nit)
    mu = -out.ineqlin.marginals if lp.G.shape[0] else np.zeros(0)
    nu = -out.eqlin.marginals if lp.A.shape[0] else np.zeros(0)
    return SolveResult(Status.OPTIMAL, out.x, mu, nu, float(out.fun), out.nit,
                       dual_lb=out.lower.marginals, dual_ub=-out.upper.marginals)


def require_optimal(result: SolveResult, what: str) -> SolveResult:
    if not result.ok:
        raise SolverError(f"{what}: solver returned {result.status.value}", result)
    return result

