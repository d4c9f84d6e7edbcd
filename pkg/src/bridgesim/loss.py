"""Monte-Carlo variational loss and its gradient through the unrolled solver."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .guided import GuidedSystem, fused_step_ops, rollout
from .network import NeuralDriftParams, theta_op
from .sde import NonFiniteState


def _fused_rollout(sys, params, theta_var, dw):
    model, t = sys.model, sys.grid.nodes
    x = np.broadcast_to(sys.x0, (dw.shape[0], sys.d)).copy()
    noise = np.einsum("nmk,mdk->nmd", dw, sys.cache["sig"][:-1])
    incs = []
    for m in range(sys.grid.M):
        tm = t[m]
        b = ad.apply(lambda v: model.drift(tm, v), lambda v, g: model.drift_vjp(tm, v, g), x)
        th = theta_op(params, theta_var, tm, x)
        x, inc = fused_step_ops(sys, m, x, b, th, noise[:, m])
        incs.append(inc)
    return ad.add_n(incs), x


def _unrolled(sys, params, dw, generic=False):
    tape = ad.Tape()
    theta_var = tape.leaf(params.flat)
    with np.errstate(over="ignore", invalid="ignore"):
        if sys.constant_diffusion and not generic:
            loss, xM = _fused_rollout(sys, params, theta_var, dw)
        else:
            states, _, loss = rollout(sys, dw, lambda t, x: theta_op(params, theta_var, t, x), keep_states=False, generic=True)
            xM = states[0]
    return tape, theta_var, loss, xM


def path_losses(sys: GuidedSystem, params: NeuralDriftParams, dw) -> np.ndarray:
    """Per-path ``sum_m (|theta|^2 / 2 - G) dt`` without recording a tape."""
    with np.errstate(over="ignore", invalid="ignore"):
        states, _, loss = rollout(sys, np.asarray(dw, dtype=float), lambda t, x: theta_op(params, None, t, x), keep_states=False)
    return np.where(np.isfinite(states[0]).all(axis=1), loss, np.nan)


def loss_and_grad(sys: GuidedSystem, params: NeuralDriftParams, dw, generic=False) -> tuple[float, np.ndarray, dict]:
    """Batch-mean loss and its gradient with respect to ``params.flat``.

    Paths that leave the finite reals are dropped and the loss is averaged
    over the survivors; with no survivors :class:`NonFiniteState` is raised.
    The returned info dict carries the per-path losses and survivor mask.
    """
    dw = np.asarray(dw, dtype=float)
    if dw.ndim != 3 or dw.shape[0] == 0:
        raise ValueError("need a nonempty batch of increments (N, M, d_w)")
    keep = np.ones(dw.shape[0], dtype=bool)
    for _ in range(3):
        tape, theta_var, per_path, xM = _unrolled(sys, params, dw[keep], generic)
        vals = ad.value(per_path)
        ok = np.isfinite(vals) & np.isfinite(ad.value(xM)).all(axis=1)
        if ok.all():
            break
        # rerun on the survivors so no non-finite value enters the reverse sweep
        idx = np.flatnonzero(keep)
        keep[idx[~ok]] = False
        if not keep.any():
            raise NonFiniteState("every path in the batch left the finite reals")
    else:
        raise NonFiniteState("non-finite values persisted after dropping diverged paths")
    n = keep.sum()
    mean = ad.total(per_path) * (1.0 / n)
    (grad,) = tape.gradient(mean, [theta_var])
    return float(ad.value(mean)), grad, {"path_losses": ad.value(per_path), "survivors": keep}


def clip_gradient(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale ``grad`` to global L2 norm ``clip_norm`` if it is longer."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    norm = float(np.linalg.norm(grad))
    if norm > clip_norm:
        return grad * (clip_norm / norm)
    return grad
