"""Time grids, Wiener increments and the explicit Euler-Maruyama integrator.

All integrators work on batches: states have shape ``(N, d)`` and noise
increments ``(N, M, d_w)``. Single-path helpers wrap the batch versions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NonFiniteState(FloatingPointError):
    """Raised when an integrated state leaves the finite reals."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_M = T``."""

    T: float
    M: int
    t0: float = field(default=0.0, init=False)

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.M + 1) * self.dt
        t[-1] = self.T
        return t

    def nearest_index(self, t: float) -> int:
        return int(np.clip(round(t / self.dt), 0, self.M))


def make_generator(seed: int, *counters: int) -> np.random.Generator:
    # Philox is counter based; keying on (seed, *counters) makes every stream
    # independent of the order in which streams are requested.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, counters)])))


@dataclass(frozen=True)
class WienerPath:
    grid: TimeGrid
    dw: np.ndarray  # (M, d_w)
    seed: int
    index: int = 0

    @property
    def d_w(self) -> int:
        return self.dw.shape[1]


def wiener_increments(grid: TimeGrid, d_w: int, seed: int, indices) -> np.ndarray:
    """Increments for trajectories ``indices`` of stream ``seed``, shape (N, M, d_w)."""
    if d_w < 1:
        raise ValueError("d_w must be >= 1")
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    out = np.empty((len(indices), grid.M, d_w))
    scale = np.sqrt(grid.dt)
    for n, idx in enumerate(indices):
        out[n] = make_generator(seed, idx).standard_normal((grid.M, d_w))
    out *= scale
    return out


def sample_wiener(grid: TimeGrid, d_w: int, seed: int, index: int = 0) -> WienerPath:
    return WienerPath(grid, wiener_increments(grid, d_w, seed, [index])[0], seed, index)


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (M+1, d)
    log_psi: float = 0.0
    loss_integrand: float = 0.0

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.grid.nodes, self.states)


@dataclass
class PathBundle:
    """A batch of trajectories driven by the increments ``dw``.

    ``finite`` flags the paths that stayed finite; the other rows of
    ``states`` are undefined past the step where they blew up.
    """

    grid: TimeGrid
    dw: np.ndarray  # (N, M, d_w)
    states: np.ndarray  # (N, M+1, d)
    log_psi: np.ndarray  # (N,)
    loss_integrand: np.ndarray  # (N,)
    finite: np.ndarray  # (N,) bool

    def __len__(self):
        return self.states.shape[0]

    def trajectory(self, n: int) -> Trajectory:
        return Trajectory(self.grid, self.states[n], float(self.log_psi[n]), float(self.loss_integrand[n]))


class SdeModel:
    """Drift ``b(t, x)`` and diffusion ``sigma(t, x)`` of a target process.

    ``x`` is always batched, shape ``(N, d)``. ``drift`` returns ``(N, d)``;
    ``diffusion`` returns a ``(d, d_w)`` array when the diffusion does not
    depend on the state and ``(N, d, d_w)`` otherwise.

    The ``*_vjp`` methods return the vector-Jacobian product with respect to
    ``x`` and are only needed for gradient-based training.
    """

    d: int
    d_w: int
    name: str = "model"

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def state_dependent_diffusion(self) -> bool:
        return False

    def drift_vjp(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no drift derivative")

    def diffusion_vjp(self, t: float, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if not self.state_dependent_diffusion:
            return np.zeros_like(x)
        raise NotImplementedError(f"{type(self).__name__} has no diffusion derivative")

    def drift_jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        """Jacobian at a single point ``x`` of shape (d,), built from ``drift_vjp``."""
        x = np.broadcast_to(np.asarray(x, dtype=float), (self.d, self.d))
        return self.drift_vjp(t, np.array(x), np.eye(self.d))


def noise_times_diffusion(sigma: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``sigma @ y`` row-wise for shared (d, d_w) or per-path (N, d, d_w) sigma."""
    if sigma.ndim == 2:
        return y @ sigma.T
    return np.einsum("nij,nj->ni", sigma, y)


def euler_maruyama_batch(model: SdeModel, x0, dw: np.ndarray, grid: TimeGrid) -> PathBundle:
    """Integrate ``model`` from ``x0`` for each row of ``dw`` (N, M, d_w)."""
    dw = np.asarray(dw, dtype=float)
    n_paths, M, d_w = dw.shape
    if M != grid.M:
        raise ValueError(f"increments have {M} steps, grid has {grid.M}")
    if d_w != model.d_w:
        raise ValueError(f"increments have d_w={d_w}, model expects {model.d_w}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != model.d:
        raise ValueError(f"x0 has dimension {x0.shape[0]}, model expects {model.d}")
    states = np.empty((n_paths, M + 1, model.d))
    states[:, 0] = x0
    x = states[:, 0].copy()
    t, dt = grid.nodes, grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(M):
            x = x + model.drift(t[m], x) * dt + noise_times_diffusion(model.diffusion(t[m], x), dw[:, m])
            states[:, m + 1] = x
    finite = np.isfinite(states).all(axis=(1, 2))
    zeros = np.zeros(n_paths)
    return PathBundle(grid, dw, states, zeros, zeros.copy(), finite)


def euler_maruyama(model: SdeModel, x0, w: WienerPath) -> Trajectory:
    """Single-path Euler-Maruyama; raises :class:`NonFiniteState` on blow-up."""
    bundle = euler_maruyama_batch(model, x0, w.dw[None], w.grid)
    if not bundle.finite[0]:
        raise NonFiniteState("trajectory left the finite reals")
    return bundle.trajectory(0)


def write_trajectory_csv(path, times: np.ndarray, states: np.ndarray) -> None:
    states = np.asarray(states)
    d = states.shape[1]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x_{i}" for i in range(d)])
        for t, row in zip(times, states):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
