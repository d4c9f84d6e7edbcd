"""Stochastic-gradient training of the neural drift correction with Adam."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .guided import GuidedSystem
from .loss import clip_gradient, loss_and_grad
from .models import UnsupportedModel, log_h
from .network import MlpArchitecture, NeuralDriftParams
from .sde import wiener_increments

SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    iterations: int = 5000
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    lr_schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        problems = []
        if not (isinstance(self.batch_size, (int, np.integer)) and self.batch_size >= 1):
            problems.append("batch_size must be a positive integer")
        if not (isinstance(self.iterations, (int, np.integer)) and self.iterations >= 1):
            problems.append("iterations must be a positive integer")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            problems.append("adam_betas must be two numbers in [0, 1)")
        if not self.adam_eps > 0:
            problems.append("adam_eps must be positive")
        if not self.clip_norm > 0:
            problems.append("clip_norm must be positive")
        if self.lr_schedule not in SCHEDULES:
            problems.append(f"lr_schedule must be one of {SCHEDULES}")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamMoments":
        return cls(np.zeros(n), np.zeros(n))


def learning_rate(cfg: TrainConfig, k: int) -> float:
    """Rate for iteration ``k`` (1-based); cosine decays from the initial rate to 0."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    frac = (k - 1) / max(cfg.iterations - 1, 1)
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * frac))


def adam_step(flat: np.ndarray, grad: np.ndarray, moments: AdamMoments, k: int, cfg: TrainConfig, lr=None):
    """Bias-corrected Adam update at iteration ``k`` >= 1; returns new arrays."""
    if flat.shape != grad.shape or moments.m.shape != flat.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    b1, b2 = cfg.adam_betas
    lr = cfg.learning_rate if lr is None else lr
    m = b1 * moments.m + (1.0 - b1) * grad
    v = b2 * moments.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**k)
    v_hat = v / (1.0 - b2**k)
    return flat - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps), AdamMoments(m, v)


@dataclass
class TrainTrace:
    losses: np.ndarray
    grad_norms: np.ndarray
    elapsed: np.ndarray  # cumulative seconds after each iteration
    params: NeuralDriftParams
    lower_bound: float | None = None

    def __len__(self):
        return len(self.losses)

    @property
    def wall_time(self) -> float:
        return float(self.elapsed[-1]) if len(self.elapsed) else 0.0

    def window_mean(self, n: int) -> float:
        return float(np.mean(self.losses[-n:]))


def lower_bound_for(sys: GuidedSystem) -> float | None:
    """``log h~(0, x0) - log h(0, x0)`` when ``h`` is known in closed form, else None."""
    obs = sys.obs
    if obs.d_obs != 1 or obs.d != 1 or obs.L_obs[0, 0] != 1.0:
        return None
    try:
        lh = log_h(sys.model, 0.0, sys.x0[0], float(obs.v[0]), obs.T, float(obs.Sigma[0, 0]))
    except UnsupportedModel:
        return None
    lh_tilde = sys.sol.log_h_tilde(0, sys.x0[None], obs.v)[0]
    return float(lh_tilde - lh)


def train(
    sys: GuidedSystem,
    arch: MlpArchitecture,
    cfg: TrainConfig,
    init: NeuralDriftParams | None = None,
    lower_bound="auto",
    callback=None,
) -> TrainTrace:
    """Run ``cfg.iterations`` steps of sample, loss_and_grad, clip and Adam.

    Iteration ``k`` draws its batch from stream ``cfg.seed`` with path
    indices ``(k - 1) N, ..., k N - 1``, so every iteration sees fresh
    noise and a run is reproducible from its seed. ``callback(k, loss,
    grad_norm, elapsed)`` is called after every iteration. The default
    ``lower_bound="auto"`` attaches :func:`lower_bound_for`.
    """
    if arch.state_dim != sys.d or arch.output_dim != sys.d_w:
        raise ValueError(
            f"architecture maps R^{arch.state_dim} -> R^{arch.output_dim}, system needs R^{sys.d} -> R^{sys.d_w}"
        )
    params = (init.copy() if init is not None else NeuralDriftParams.init(arch, cfg.seed))
    params.clip_norm = cfg.clip_norm
    moments = AdamMoments.zeros(arch.n_params)
    K, N = cfg.iterations, cfg.batch_size
    losses, norms, elapsed = np.empty(K), np.empty(K), np.empty(K)
    t0 = time.perf_counter()
    for k in range(1, K + 1):
        dw = wiener_increments(sys.grid, sys.d_w, cfg.seed, np.arange((k - 1) * N, k * N))
        loss, grad, _ = loss_and_grad(sys, params, dw)
        gnorm = float(np.linalg.norm(grad))
        grad = clip_gradient(grad, cfg.clip_norm)
        flat, moments = adam_step(params.flat, grad, moments, k, cfg, learning_rate(cfg, k))
        params = NeuralDriftParams(arch, flat, cfg.clip_norm)
        losses[k - 1], norms[k - 1] = loss, gnorm
        elapsed[k - 1] = time.perf_counter() - t0
        if callback is not None:
            callback(k, loss, gnorm, elapsed[k - 1])
    if lower_bound == "auto":
        lower_bound = lower_bound_for(sys)
    return TrainTrace(losses, norms, elapsed, params, lower_bound)
