"""Quadratic stage costs over tube parameters and vertex inputs.

A stage cost is ``l(y, u) = z' P z`` with ``z = (y, u_1, ..., u_mbar)``.  The
practical weighting penalizes the average vertex (the tube center), the average
input, and the spread of vertices and inputs around those averages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import VertexConfiguration


class NotPositiveDefinite(ValueError):
    pass


class NonQuadraticCost(TypeError):
    pass


def _weight(Wt, dim: int, name: str) -> np.ndarray:
    W = np.atleast_2d(np.asarray(Wt, dtype=float))
    if W.shape == (1, 1) and dim != 1:
        W = W[0, 0] * np.eye(dim)
    if W.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {W.shape}")
    if not np.allclose(W, W.T, atol=1e-12 * max(1.0, np.abs(W).max())):
        raise NotPositiveDefinite(f"{name} is not symmetric")
    if np.linalg.eigvalsh(W).min() <= 0:
        raise NotPositiveDefinite(f"{name} is not positive definite")
    return W


@dataclass(frozen=True, eq=False)
class StageCost:
    """``l(y, u) = [y; u]' P [y; u]`` with ``u`` the stacked vertex inputs."""

    P: np.ndarray
    m: int
    mbar: int
    nu: int

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        size = self.m + self.mbar * self.nu
        if P.shape != (size, size):
            raise ValueError(f"P must be {size}x{size}, got {P.shape}")
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P).min() < -1e-10 * max(1.0, np.abs(P).max()):
            raise NotPositiveDefinite("stage cost form is not positive semidefinite")
        object.__setattr__(self, "P", P)

    @property
    def Pyy(self) -> np.ndarray:
        return self.P[: self.m, : self.m]

    @property
    def Pyu(self) -> np.ndarray:
        return self.P[: self.m, self.m:]

    @property
    def Puu(self) -> np.ndarray:
        return self.P[self.m:, self.m:]

    def stack(self, y, u) -> np.ndarray:
        return np.concatenate([np.asarray(y, dtype=float).reshape(-1),
                               np.asarray(u, dtype=float).reshape(-1)])

    def __call__(self, y, u) -> float:
        z = self.stack(y, u)
        return float(z @ self.P @ z)

    def gradient(self, y, u) -> np.ndarray:
        return 2.0 * self.P @ self.stack(y, u)

    @property
    def hessian(self) -> np.ndarray:
        return 2.0 * self.P

    @classmethod
    def parameter_norm(cls, m: int, mbar: int, nu: int) -> "StageCost":
        """``l(y, u) = ||y||^2``, independent of the inputs."""
        P = np.zeros((m + mbar * nu, m + mbar * nu))
        P[:m, :m] = np.eye(m)
        return cls(P, m, mbar, nu)


def stage_cost_form(Q, R, S, T, vc: VertexConfiguration, nu: int) -> StageCost:
    """Materialize the weighted center/spread cost as an explicit quadratic form.

    ``l = ||Vbar y||_Q^2 + ||Ubar u||_R^2
          + sum_i ||(V_i - Vbar) y||_S^2 + ||u_i - Ubar u||_T^2``
    with ``Vbar`` the mean vertex map and ``Ubar u`` the mean vertex input.
    """
    n, m, mbar = vc.n, vc.m, vc.mbar
    Q = _weight(Q, n, "Q")
    S = _weight(S, n, "S")
    R = _weight(R, nu, "R")
    T = _weight(T, nu, "T")
    Vbar = vc.maps.mean(axis=0)
    Pyy = Vbar.T @ Q @ Vbar
    for V in vc.maps:
        D = V - Vbar
        Pyy += D.T @ S @ D
    Ubar = np.kron(np.ones((1, mbar)) / mbar, np.eye(nu))
    Puu = Ubar.T @ R @ Ubar
    for i in range(mbar):
        Ei = np.zeros((nu, mbar * nu))
        Ei[:, i * nu:(i + 1) * nu] = np.eye(nu)
        D = Ei - Ubar
        Puu += D.T @ T @ D
    P = np.zeros((m + mbar * nu, m + mbar * nu))
    P[:m, :m] = Pyy
    P[m:, m:] = Puu
    return StageCost(P, m, mbar, nu)
