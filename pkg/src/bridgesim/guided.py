"""Guided proposals: drift ``b + a r~``, the G-functional and log-Psi weights.

The same rollout integrates the guided proposal (no correction) and the
neural guided bridge (with correction ``sigma * theta``). When the model's
diffusion does not depend on the state, per-node products such as ``a H``
are precomputed once and a fused path is used; otherwise every step goes
through :meth:`GuidedSystem.step_terms`, which also records onto a tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .conditioning import (
    BackwardOdeSolution,
    LinearAuxiliary,
    ObservationScheme,
    check_matching,
    solve_backward_odes,
)
from .sde import NonFiniteState, PathBundle, SdeModel, TimeGrid, Trajectory, WienerPath, noise_times_diffusion


@dataclass(frozen=True)
class GuidedSystem:
    model: SdeModel
    aux: LinearAuxiliary
    obs: ObservationScheme
    sol: BackwardOdeSolution
    x0: np.ndarray
    cache: dict = field(repr=False, default=None, compare=False)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        object.__setattr__(self, "x0", x0)
        d = self.model.d
        if self.aux.d != d or self.obs.d != d or x0.shape[0] != d:
            raise ValueError(
                f"dimension mismatch: model d={d}, auxiliary d={self.aux.d}, "
                f"L_obs columns={self.obs.d}, x0 length={x0.shape[0]}"
            )
        t = self.grid.nodes
        H, c = self.sol.H, self.sol.c
        sigt = np.stack([np.atleast_2d(self.aux.sigma_tilde(s)) for s in t])
        if sigt.shape[2] != self.model.d_w:
            raise ValueError("auxiliary noise dimension differs from the model's")
        cache = {
            "beta": np.stack([np.atleast_1d(self.aux.beta(s)) for s in t]),
            "B": np.stack([np.atleast_2d(self.aux.Bmat(s)) for s in t]),
            "sigt": sigt,
            "tr_at_H": np.einsum("mij,mij->m", sigt, H @ sigt),
        }
        if not self.model.state_dependent_diffusion:
            sig = np.stack([self.model.diffusion(s, x0[None]) for s in t])
            a = sig @ np.swapaxes(sig, 1, 2)
            D = a - sigt @ np.swapaxes(sigt, 1, 2)
            cache.update(
                sig=sig,
                aH=a @ H,
                ac=np.einsum("mij,mj->mi", a, c),
                D=D,
                # -1/2 tr((a - a~) H): the x-independent part of G
                g_const=-0.5 * np.einsum("mij,mji->m", D, H),
                same=np.array([np.array_equal(s1, s2) for s1, s2 in zip(sig, sigt)]),
            )
        for arr in cache.values():
            arr.setflags(write=False)
        object.__setattr__(self, "cache", cache)

    @classmethod
    def build(cls, model, aux, obs, grid: TimeGrid, x0) -> "GuidedSystem":
        check_matching(model, aux, obs)
        return cls(model, aux, obs, solve_backward_odes(aux, obs, grid), x0)

    @property
    def grid(self) -> TimeGrid:
        return self.sol.grid

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def d_w(self) -> int:
        return self.model.d_w

    @property
    def constant_diffusion(self) -> bool:
        return "sig" in self.cache

    def step_terms(self, m: int, x):
        """Drift, diffusion, r~, sigma^T r~ and G at node ``m`` (tape aware)."""
        t = self.grid.nodes[m]
        H = self.sol.H[m]
        model = self.model
        b = ad.apply(lambda v: model.drift(t, v), lambda v, g: model.drift_vjp(t, v, g), x)
        if model.state_dependent_diffusion:
            sig = ad.apply(lambda v: model.diffusion(t, v), lambda v, g: model.diffusion_vjp(t, v, g), x)
        else:
            sig = model.diffusion(t, ad.value(x))
        r = self.sol.c[m] - ad.matmul_const(x, H)
        sr = ad.bmtv(sig, r)
        b_tilde = self.cache["beta"][m] + ad.matmul_const(x, self.cache["B"][m])
        # G = <b - b~, r~> - 1/2 tr((a - a~) H) + 1/2 (|sigma^T r~|^2 - |sigma~^T r~|^2)
        G = ad.row_dot(b - b_tilde, r)
        vs, sigt = ad.value(sig), self.cache["sigt"][m]
        if not (vs.ndim == 2 and np.array_equal(vs, sigt)):
            tr_aH = ad.quad_trace(sig, H) if vs.ndim == 3 else np.einsum("ij,ij->", vs, H @ vs)
            st_r = ad.bmtv(sigt, r)
            G = G - 0.5 * (tr_aH - self.cache["tr_at_H"][m]) + 0.5 * (ad.row_dot(sr, sr) - ad.row_dot(st_r, st_r))
        return b, sig, r, sr, G


def guided_drift(sys: GuidedSystem, m: int, x) -> np.ndarray:
    """``b(t_m, x) + a(t_m, x) r~(t_m, x)`` for ``x`` of shape (d,) or (N, d)."""
    x = np.asarray(x, dtype=float)
    b, sig, _, sr, _ = sys.step_terms(m, np.atleast_2d(x))
    out = b + noise_times_diffusion(sig, sr)
    return out[0] if x.ndim == 1 else out


def g_functional(sys: GuidedSystem, m: int, x):
    x = np.asarray(x, dtype=float)
    G = sys.step_terms(m, np.atleast_2d(x))[4]
    return float(G[0]) if x.ndim == 1 else G


def _g_fast(sys, m, x, b):
    C = sys.cache
    r = sys.sol.c[m] - x @ sys.sol.H[m].T
    G = np.einsum("ni,ni->n", b - (C["beta"][m] + x @ C["B"][m].T), r)
    if not C["same"][m]:
        G += C["g_const"][m] + 0.5 * np.einsum("ni,ni->n", r @ C["D"][m], r)
    return G


def rollout(sys: GuidedSystem, dw, theta=None, keep_states=True, weights=True, generic=False):
    """Euler-Maruyama for the guided (optionally neural) SDE.

    ``theta(t, x)`` returns the correction or is None for the plain guided
    proposal. Returns ``(states, log_psi, loss_integrand)``: ``states`` is a
    list of per-node (N, d) states (or just ``[x_M]``), ``log_psi`` the
    left-endpoint sum of ``G dt`` and ``loss_integrand`` that of
    ``(|theta|^2 / 2 - G) dt``. With ``weights=False`` (fast path only)
    both sums are skipped and returned as zeros.
    """
    grid = sys.grid
    dt, t = grid.dt, grid.nodes
    n = dw.shape[0]
    x = np.broadcast_to(sys.x0, (n, sys.d)).copy()
    states = [x]
    log_psi = np.zeros(n)
    loss = np.zeros(n)
    if sys.constant_diffusion and not generic:
        C = sys.cache
        # x_{m+1} = x P_m + b dt + theta S_m + (a c dt + sigma dw), all per-node constants folded
        P = np.eye(sys.d) - dt * np.swapaxes(C["aH"], 1, 2)
        S = dt * np.swapaxes(C["sig"], 1, 2)
        shift = np.einsum("nmk,mdk->nmd", dw, C["sig"][:-1])
        shift += dt * C["ac"][:-1]
        drift = sys.model.drift
        for m in range(grid.M):
            b = drift(t[m], x)
            if weights:
                G = _g_fast(sys, m, x, b)
                G *= dt
                log_psi += G
                loss -= G
            x_next = x @ P[m]
            x_next += b * dt
            if theta is not None:
                th = theta(t[m], x)
                x_next += th @ S[m]
                if weights:
                    loss += (0.5 * dt) * np.einsum("ni,ni->n", th, th)
            x_next += shift[:, m]
            x = x_next
            if keep_states:
                states.append(x)
    else:
        for m in range(grid.M):
            b, sig, _, sr, G = sys.step_terms(m, x)
            push = sr * dt + dw[:, m]
            if theta is not None:
                th = theta(t[m], x)
                push = push + th * dt
                loss = loss + 0.5 * ad.row_dot(th, th) * dt
            loss = loss - G * dt
            log_psi = log_psi + G * dt
            x = x + b * dt + ad.bmv(sig, push)
            if keep_states:
                states.append(x)
    if not keep_states:
        states = [x]
    return states, log_psi, loss


def _bundle(sys, dw, theta=None, generic=False) -> PathBundle:
    dw = np.asarray(dw, dtype=float)
    if dw.ndim != 3 or dw.shape[1:] != (sys.grid.M, sys.d_w):
        raise ValueError(f"increments must have shape (N, {sys.grid.M}, {sys.d_w})")
    with np.errstate(over="ignore", invalid="ignore"):
        states, log_psi, loss = rollout(sys, dw, theta, generic=generic)
    states = np.stack(states, axis=1)
    finite = np.isfinite(states).all(axis=(1, 2)) & np.isfinite(log_psi) & np.isfinite(loss)
    return PathBundle(sys.grid, dw, states, log_psi, loss, finite)


def sample_guided_batch(sys: GuidedSystem, dw, generic=False) -> PathBundle:
    return _bundle(sys, dw, generic=generic)


def sample_guided(sys: GuidedSystem, w: WienerPath) -> Trajectory:
    bundle = _bundle(sys, w.dw[None])
    if not bundle.finite[0]:
        raise NonFiniteState("guided trajectory left the finite reals")
    return bundle.trajectory(0)


def sample_neural_batch(sys: GuidedSystem, params, dw, generic=False) -> PathBundle:
    """Neural guided bridge paths under a trained correction ``params``."""
    from .network import ThetaEvaluator, theta_forward

    theta = (lambda t, x: theta_forward(params, t, x)) if generic else ThetaEvaluator(params)
    return _bundle(sys, dw, theta, generic=generic)


def sample_neural_states(sys: GuidedSystem, params, dw) -> np.ndarray:
    """States only, (N, M+1, d); skips the weight bookkeeping for speed."""
    from .network import ThetaEvaluator

    with np.errstate(over="ignore", invalid="ignore"):
        states, _, _ = rollout(sys, np.asarray(dw, dtype=float), ThetaEvaluator(params), weights=False)
    return np.stack(states, axis=1)


def fused_step_ops(sys: GuidedSystem, m: int, x, b, th, noise_m):
    """Tape nodes for one neural step under a state-independent diffusion.

    Returns ``(x_next, increment)`` where ``increment`` is the per-path
    ``(|theta|^2 / 2 - G) dt``.
    """
    C = sys.cache
    dt = sys.grid.dt
    H, c = sys.sol.H[m], sys.sol.c[m]
    sig, aH, Bm, D = C["sig"][m], C["aH"][m], C["B"][m], C["D"][m]
    same = bool(C["same"][m])
    vx, vb, vth = ad.value(x), ad.value(b), ad.value(th)

    x_next = vx + (vb + C["ac"][m] - vx @ aH.T + vth @ sig.T) * dt + noise_m

    def vjp_state(g):
        return g - (g @ aH) * dt, g * dt, (g @ sig) * dt

    r = c - vx @ H.T
    resid = vb - (C["beta"][m] + vx @ Bm.T)
    G = np.einsum("ni,ni->n", resid, r)
    Dr = None
    if not same:
        Dr = r @ D
        G += C["g_const"][m] + 0.5 * np.einsum("ni,ni->n", Dr, r)
    inc = (0.5 * np.einsum("ni,ni->n", vth, vth) - G) * dt

    def vjp_inc(g):
        gdt = g[:, None] * dt
        inner = resid if same else resid + Dr
        gx = gdt * (r @ Bm + inner @ H)
        return gx, -gdt * r, gdt * vth

    tape = ad._tape_of(x, b, th)
    return tape.record(x_next, (x, b, th), vjp_state), tape.record(inc, (x, b, th), vjp_inc)
