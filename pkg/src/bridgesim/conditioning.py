"""Observation scheme, linear auxiliary process and the backward ODE system.

For an auxiliary process ``dX = (beta(t) + B(t) X) dt + sigma_tilde(t) dW``
and an observation ``v ~ N(L X_T, Sigma)`` the guiding function is Gaussian,

    h~(t, x) = N(v; u(t) + L(t) x, Mdag(t)),

with ``L``, ``Mdag``, ``u`` solving

    dL/dt = -L B,   dMdag/dt = -L a~ L^T,   du/dt = -L beta

backwards from ``L(T) = L``, ``Mdag(T) = Sigma``, ``u(T) = 0``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sde import SdeModel, TimeGrid

JITTERS = (0.0, 1e-12, 1e-10)


class SingularMdag(np.linalg.LinAlgError):
    """The backward covariance could not be inverted even after jitter."""


class MatchingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ObservationScheme:
    L_obs: np.ndarray
    Sigma: np.ndarray
    v: np.ndarray
    T: float

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L_obs, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if np.linalg.matrix_rank(L) != L.shape[0]:
            raise ValueError("L_obs must have full row rank")
        if Sigma.shape != (L.shape[0], L.shape[0]):
            raise ValueError(f"Sigma must be {L.shape[0]}x{L.shape[0]}")
        if not np.allclose(Sigma, Sigma.T) or np.linalg.eigvalsh(Sigma).min() <= 0:
            raise ValueError("Sigma must be symmetric positive definite")
        if v.shape != (L.shape[0],):
            raise ValueError(f"v must have length {L.shape[0]}")
        object.__setattr__(self, "L_obs", L)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "v", v)

    @classmethod
    def isotropic(cls, L_obs, v, eps2: float, T: float) -> "ObservationScheme":
        L = np.atleast_2d(np.asarray(L_obs, dtype=float))
        return cls(L, eps2 * np.eye(L.shape[0]), v, T)

    @property
    def d_obs(self) -> int:
        return self.L_obs.shape[0]

    @property
    def d(self) -> int:
        return self.L_obs.shape[1]


def _const(value) -> Callable[[float], np.ndarray]:
    value = np.array(value, dtype=float)
    value.setflags(write=False)
    return lambda t: value


@dataclass(frozen=True)
class LinearAuxiliary:
    """The triplet ``(beta, B, sigma_tilde)``, each a function of time."""

    beta: Callable[[float], np.ndarray]
    Bmat: Callable[[float], np.ndarray]
    sigma_tilde: Callable[[float], np.ndarray]
    is_constant: bool = False

    @classmethod
    def constant(cls, beta, B, sigma_tilde) -> "LinearAuxiliary":
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        sigma_tilde = np.atleast_2d(np.asarray(sigma_tilde, dtype=float))
        d = beta.shape[0]
        if B.shape != (d, d) or sigma_tilde.shape[0] != d:
            raise ValueError("inconsistent auxiliary dimensions")
        if not (np.isfinite(beta).all() and np.isfinite(B).all() and np.isfinite(sigma_tilde).all()):
            raise ValueError("auxiliary coefficients must be finite")
        return cls(_const(beta), _const(B), _const(sigma_tilde), True)

    @classmethod
    def scaled_brownian(cls, sigma_tilde) -> "LinearAuxiliary":
        sigma_tilde = np.atleast_2d(np.asarray(sigma_tilde, dtype=float))
        d = sigma_tilde.shape[0]
        return cls.constant(np.zeros(d), np.zeros((d, d)), sigma_tilde)

    @property
    def d(self) -> int:
        return np.atleast_1d(self.beta(0.0)).shape[0]

    def a_tilde(self, t: float) -> np.ndarray:
        s = self.sigma_tilde(t)
        return s @ s.T

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.beta(t) + x @ self.Bmat(t).T


def taylor_auxiliary(model: SdeModel, point, sigma_tilde, t: float = 0.0) -> LinearAuxiliary:
    """First-order Taylor linearisation of the drift at ``point``.

    ``b~(x) = b(t, point) + J_b(t, point) (x - point)``; the diffusion of the
    auxiliary is the supplied constant ``sigma_tilde``.
    """
    point = np.asarray(point, dtype=float)
    J = model.drift_jacobian(t, point)
    b0 = model.drift(t, point[None])[0]
    return LinearAuxiliary.constant(b0 - J @ point, J, sigma_tilde)


def check_matching(model: SdeModel, aux: LinearAuxiliary, obs: ObservationScheme, rtol: float = 1e-6) -> bool:
    """Warn when a full-state, near noise-free observation has ``a~(T) != a(T, v)``.

    Returns True when the check applies and passes, or when it does not apply.
    """
    if obs.d_obs != obs.d or np.linalg.eigvalsh(obs.Sigma).max() > 1e-2:
        return True
    xT = np.linalg.solve(obs.L_obs, obs.v)
    sig = model.diffusion(obs.T, xT[None])
    sig = sig[0] if sig.ndim == 3 else sig
    a, a_tilde = sig @ sig.T, aux.a_tilde(obs.T)
    if np.allclose(a, a_tilde, rtol=rtol, atol=rtol * max(1.0, np.abs(a).max())):
        return True
    warnings.warn(
        "auxiliary diffusion does not match the model diffusion at the conditioning point; "
        "the guided proposal may not be absolutely continuous w.r.t. the bridge",
        MatchingWarning,
        stacklevel=2,
    )
    return False


def spd_inverse(A: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix with jitter escalation."""
    A = 0.5 * (A + A.T)
    eye = np.eye(A.shape[0])
    for jitter in JITTERS:
        try:
            C = np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        Cinv = np.linalg.solve(C, eye)
        inv = Cinv.T @ Cinv
        if np.isfinite(inv).all():
            return 0.5 * (inv + inv.T)
    raise SingularMdag("backward covariance is not positive definite")


@dataclass(frozen=True)
class BackwardOdeSolution:
    """Per-node solution of the backward ODEs plus cached guiding terms.

    ``H[m] = L^T M L`` and ``c[m] = L^T M (v - u)`` so that
    ``r~(t_m, x) = c[m] - H[m] x``.
    """

    grid: TimeGrid
    L_t: np.ndarray  # (M+1, d', d)
    Mdag_t: np.ndarray  # (M+1, d', d')
    M_t: np.ndarray  # (M+1, d', d')
    u_t: np.ndarray  # (M+1, d')
    H: np.ndarray  # (M+1, d, d)
    c: np.ndarray  # (M+1, d)

    def log_h_tilde(self, m: int, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``log h~(t_m, x)`` for batched ``x`` of shape (N, d)."""
        mean = self.u_t[m] + x @ self.L_t[m].T
        resid = v - mean
        cov = self.Mdag_t[m]
        _, logdet = np.linalg.slogdet(2 * np.pi * cov)
        return -0.5 * logdet - 0.5 * np.einsum("ni,ij,nj->n", resid, self.M_t[m], resid)


def _rhs(aux: LinearAuxiliary, t: float, L, Mdag, u):
    del Mdag
    return -L @ aux.Bmat(t), -L @ aux.a_tilde(t) @ L.T, -L @ aux.beta(t)


def solve_backward_odes(aux: LinearAuxiliary, obs: ObservationScheme, grid: TimeGrid) -> BackwardOdeSolution:
    """Classical RK4 integration backwards in time on ``grid``."""
    if not np.isclose(grid.T, obs.T, rtol=1e-12, atol=0.0):
        raise ValueError(f"grid horizon {grid.T} differs from observation time {obs.T}")
    if aux.d != obs.d:
        raise ValueError(f"auxiliary dimension {aux.d} does not match L_obs columns {obs.d}")
    M, h, t = grid.M, grid.dt, grid.nodes
    dp, d = obs.L_obs.shape
    L_t = np.empty((M + 1, dp, d))
    Mdag_t = np.empty((M + 1, dp, dp))
    u_t = np.empty((M + 1, dp))
    L, Mdag, u = obs.L_obs.copy(), obs.Sigma.copy(), np.zeros(dp)
    L_t[M], Mdag_t[M], u_t[M] = L, Mdag, u
    for m in range(M - 1, -1, -1):
        s = t[m + 1]
        # step of size -h in time
        k1 = _rhs(aux, s, L, Mdag, u)
        y2 = [y - 0.5 * h * k for y, k in zip((L, Mdag, u), k1)]
        k2 = _rhs(aux, s - 0.5 * h, *y2)
        y3 = [y - 0.5 * h * k for y, k in zip((L, Mdag, u), k2)]
        k3 = _rhs(aux, s - 0.5 * h, *y3)
        y4 = [y - h * k for y, k in zip((L, Mdag, u), k3)]
        k4 = _rhs(aux, s - h, *y4)
        L, Mdag, u = (
            y - h / 6.0 * (a + 2 * b + 2 * c + e) for y, a, b, c, e in zip((L, Mdag, u), k1, k2, k3, k4)
        )
        Mdag = 0.5 * (Mdag + Mdag.T)
        L_t[m], Mdag_t[m], u_t[m] = L, Mdag, u
    M_t = np.stack([spd_inverse(A) for A in Mdag_t])
    LtM = np.einsum("mki,mkj->mij", L_t, M_t)  # L^T M, (M+1, d, d')
    H = LtM @ L_t
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    c = np.einsum("mij,mj->mi", LtM, obs.v - u_t)
    for arr in (L_t, Mdag_t, M_t, u_t, H, c):
        arr.setflags(write=False)
    return BackwardOdeSolution(grid, L_t, Mdag_t, M_t, u_t, H, c)


def guiding_score(sol: BackwardOdeSolution, obs: ObservationScheme, m: int, x) -> np.ndarray:
    """``r~(t_m, x) = L^T M (v - u - L x)``; ``x`` of shape (d,) or (N, d)."""
    if not 0 <= m <= sol.grid.M:
        raise IndexError(f"node {m} outside 0..{sol.grid.M}")
    x = np.asarray(x, dtype=float)
    resid = obs.v - sol.u_t[m] - x @ sol.L_t[m].T
    return resid @ (sol.M_t[m] @ sol.L_t[m])


def neg_hessian(sol: BackwardOdeSolution, m: int) -> np.ndarray:
    if not 0 <= m <= sol.grid.M:
        raise IndexError(f"node {m} outside 0..{sol.grid.M}")
    return sol.H[m]
