"""Preconditioned Crank-Nicolson Metropolis-Hastings on Wiener increments.

The proposal ``eta * w + sqrt(1 - eta^2) * z`` leaves the Wiener measure
invariant, so the acceptance ratio reduces to the ratio of guided-proposal
weights ``Psi``, computed here as a difference of ``log_psi`` values.

Several chains can be advanced together: each has its own generator and the
proposals of all chains are integrated as one batch.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .guided import GuidedSystem, sample_guided_batch
from .sde import NonFiniteState, TimeGrid, Trajectory, WienerPath, make_generator

MAX_INIT_TRIES = 100


@dataclass(frozen=True)
class PcnState:
    w: WienerPath
    traj: Trajectory
    eta: float
    accepted: int = 0
    proposed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0 <= self.accepted <= self.proposed:
            raise ValueError("need 0 <= accepted <= proposed")

    @property
    def log_psi(self) -> float:
        return self.traj.log_psi

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def _check_eta(eta):
    # eta = 1 freezes the chain; it is admitted for testing only
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")


def propose(w: np.ndarray, eta: float, z: np.ndarray) -> np.ndarray:
    """``eta * w + sqrt(1 - eta^2) * z`` for increments ``w`` and fresh ``z`` of equal scale."""
    return eta * w + np.sqrt(1.0 - eta * eta) * z


def accept_probability(log_psi_new, log_psi_old):
    """``min(1, Psi_new / Psi_old)`` from log weights; non-finite proposals get 0."""
    log_psi_new = np.asarray(log_psi_new, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(np.minimum(log_psi_new - log_psi_old, 0.0))
    return np.where(np.isfinite(log_psi_new), ratio, 0.0)


def initial_state(sys: GuidedSystem, eta: float, rng: np.random.Generator, seed: int = 0) -> PcnState:
    """Draw a start path from the Wiener measure, redrawing if it blows up."""
    _check_eta(eta)
    grid = sys.grid
    for _ in range(MAX_INIT_TRIES):
        dw = rng.standard_normal((grid.M, sys.d_w)) * np.sqrt(grid.dt)
        bundle = sample_guided_batch(sys, dw[None])
        if bundle.finite[0]:
            return PcnState(WienerPath(grid, dw, seed), bundle.trajectory(0), eta)
    raise NonFiniteState(f"no finite starting path in {MAX_INIT_TRIES} draws")


def pcn_step(sys: GuidedSystem, state: PcnState, rng: np.random.Generator) -> PcnState:
    """One Metropolis-Hastings step; a non-finite proposal counts as a rejection."""
    grid = sys.grid
    z = rng.standard_normal(state.w.dw.shape) * np.sqrt(grid.dt)
    w_new = propose(state.w.dw, state.eta, z)
    bundle = sample_guided_batch(sys, w_new[None])
    lp_new = bundle.log_psi[0] if bundle.finite[0] else np.nan
    accept = rng.uniform() < accept_probability(lp_new, state.log_psi)
    if accept:
        return PcnState(
            replace(state.w, dw=w_new), bundle.trajectory(0), state.eta, state.accepted + 1, state.proposed + 1
        )
    return replace(state, proposed=state.proposed + 1)


def n_kept(iters: int, burn_in: int, thin: int) -> int:
    return (iters - burn_in) // thin


@dataclass
class PcnResult:
    """Thinned post-burn-in states of one or more chains.

    ``states`` has shape (chains, kept, M+1, d); ``accepted`` holds the
    per-iteration accept decisions (chains, iters).
    """

    grid: TimeGrid
    states: np.ndarray
    log_psi: np.ndarray
    accepted: np.ndarray
    eta: float
    seeds: tuple

    @property
    def acceptance_rates(self) -> np.ndarray:
        return self.accepted.mean(axis=1)

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean())

    def trajectories(self, chain: int = 0) -> list:
        return [Trajectory(self.grid, s, float(lp)) for s, lp in zip(self.states[chain], self.log_psi[chain])]


def run_chains(
    sys: GuidedSystem, eta: float, iters: int, burn_in: int = 0, thin: int = 1, seeds=(0,), keep_states: bool = True
) -> PcnResult:
    """Advance one chain per seed for ``iters`` steps.

    After step ``i`` (1-based) the current path is kept when ``i > burn_in``
    and ``(i - burn_in) % thin == 0``.
    """
    _check_eta(eta)
    if not (isinstance(iters, (int, np.integer)) and iters >= 1):
        raise ValueError("iters must be a positive integer")
    if not 0 <= burn_in < iters:
        raise ValueError("need 0 <= burn_in < iters")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    grid = sys.grid
    rngs = [make_generator(s, 0) for s in seeds]
    start = [initial_state(sys, eta, rng, s) for rng, s in zip(rngs, seeds)]
    w = np.stack([s.w.dw for s in start])
    cur = np.stack([s.traj.states for s in start])
    lp = np.array([s.log_psi for s in start])

    n_chains = len(seeds)
    kept = n_kept(iters, burn_in, thin)
    out_states = np.empty((n_chains, kept if keep_states else 0, grid.M + 1, sys.d))
    out_lp = np.empty((n_chains, kept))
    decisions = np.zeros((n_chains, iters), dtype=bool)
    scale = np.sqrt(grid.dt)
    shape = (grid.M, sys.d_w)
    k = 0
    for i in range(1, iters + 1):
        z = np.stack([rng.standard_normal(shape) for rng in rngs]) * scale
        u = np.array([rng.uniform() for rng in rngs])
        w_new = propose(w, eta, z)
        bundle = sample_guided_batch(sys, w_new)
        lp_new = np.where(bundle.finite, bundle.log_psi, np.nan)
        acc = u < accept_probability(lp_new, lp)
        decisions[:, i - 1] = acc
        if acc.any():
            w[acc] = w_new[acc]
            cur[acc] = bundle.states[acc]
            lp[acc] = lp_new[acc]
        if i > burn_in and (i - burn_in) % thin == 0:
            if keep_states:
                out_states[:, k] = cur
            out_lp[:, k] = lp
            k += 1
    return PcnResult(grid, out_states, out_lp, decisions, float(eta), seeds)


def pcn_chain(sys: GuidedSystem, eta: float, iters: int, burn_in: int = 0, thin: int = 1, seed: int = 0):
    """Single chain; returns ``(trajectories, acceptance_rate)``."""
    res = run_chains(sys, eta, iters, burn_in, thin, (seed,))
    return res.trajectories(0), res.acceptance_rate
