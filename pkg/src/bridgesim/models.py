"""Concrete diffusion models, their auxiliary processes and closed-form bridges."""
from __future__ import annotations

import math

import numpy as np

from .conditioning import LinearAuxiliary, ObservationScheme
from .sde import SdeModel


class UnsupportedModel(TypeError):
    pass


class LinearSdeModel(SdeModel):
    """``dX = (beta + B X) dt + sigma dW`` with constant coefficients."""

    name = "linear"

    def __init__(self, beta, B, sigma):
        self.beta = np.atleast_1d(np.asarray(beta, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        self.d, self.d_w = self.sigma.shape

    def drift(self, t, x):
        return self.beta + x @ self.B.T

    def diffusion(self, t, x):
        return self.sigma

    def drift_vjp(self, t, x, g):
        return g @ self.B


class BrownianDriftModel(SdeModel):
    """``dX = gamma dt + sigma dW`` in one dimension."""

    name = "brownian"
    d = d_w = 1

    def __init__(self, gamma: float = 1.0, sigma: float = 1.0):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.gamma, self.sigma = float(gamma), float(sigma)
        self._sig = np.array([[self.sigma]])

    def drift(self, t, x):
        return np.full_like(x, self.gamma)

    def diffusion(self, t, x):
        return self._sig

    def drift_vjp(self, t, x, g):
        return np.zeros_like(g)

    def transition_mean_var(self, tau: float, x):
        return np.asarray(x, dtype=float) + self.gamma * tau, self.sigma**2 * tau


class OuModel(SdeModel):
    """``dX = gamma (mu - X) dt + sigma dW`` in one dimension."""

    name = "ou"
    d = d_w = 1

    def __init__(self, gamma: float = 1.7, mu: float = 1.0, sigma: float = 0.3):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.gamma, self.mu, self.sigma = float(gamma), float(mu), float(sigma)
        self._sig = np.array([[self.sigma]])

    def drift(self, t, x):
        return self.gamma * (self.mu - x)

    def diffusion(self, t, x):
        return self._sig

    def drift_vjp(self, t, x, g):
        return -self.gamma * g

    def transition_mean_var(self, tau: float, x):
        """Mean ``m_{t,t+tau}(x)`` and variance of ``X_{t+tau} | X_t = x``."""
        e = np.exp(-self.gamma * tau)
        mean = self.mu + (np.asarray(x, dtype=float) - self.mu) * e
        var = self.sigma**2 / (2 * self.gamma) * (1.0 - e * e)
        return mean, var


class CellModel(SdeModel):
    """Two-gene toggle switch with Hill-type activation and repression."""

    name = "cell"
    d = d_w = 2
    HILL = 2.0**-4

    def __init__(self, sigma: float = 0.1):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self._sig = self.sigma * np.eye(2)

    def drift(self, t, x):
        c = self.HILL
        p = x**4
        act = p / (c + p)
        rep = c / (c + p)
        return act + rep[:, ::-1] - x

    def drift_vjp(self, t, x, g):
        c = self.HILL
        p = x**4
        dact = 4 * x**3 * c / (c + p) ** 2  # d/dx x^4/(c+x^4) = -d/dx c/(c+x^4)
        # b_i = act(x_i) + rep(x_j) - x_i
        return g * (dact - 1.0) - g[:, ::-1] * dact

    def diffusion(self, t, x):
        return self._sig


class FhnModel(SdeModel):
    """FitzHugh-Nagumo model with noise on the second coordinate only."""

    name = "fhn"
    d, d_w = 2, 1

    def __init__(self, chi=0.1, s=0.0, gamma=1.5, alpha=0.8, sigma=0.3):
        if chi == 0:
            raise ValueError("chi must be nonzero")
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.chi, self.s, self.gamma, self.alpha, self.sigma = map(float, (chi, s, gamma, alpha, sigma))
        self._sig = np.array([[0.0], [self.sigma]])

    def drift(self, t, x):
        x1, x2 = x[:, 0], x[:, 1]
        out = np.empty_like(x)
        out[:, 0] = (x1 - x2 + self.s - x1**3) / self.chi
        out[:, 1] = self.gamma * x1 - x2 + self.alpha
        return out

    def drift_vjp(self, t, x, g):
        x1 = x[:, 0]
        out = np.empty_like(g)
        out[:, 0] = g[:, 0] * (1.0 - 3 * x1**2) / self.chi + g[:, 1] * self.gamma
        out[:, 1] = -g[:, 0] / self.chi - g[:, 1]
        return out

    def diffusion(self, t, x):
        return self._sig


class LandmarkModel(SdeModel):
    """``dX = Q(X) dW`` with ``Q_ij = k(x_i, x_j) I`` and a Gaussian kernel.

    The state stacks ``n`` landmarks in ``R^dim`` landmark-major:
    ``x = (x_1^1, ..., x_1^dim, x_2^1, ...)``.
    """

    name = "landmark"

    def __init__(self, n: int = 10, dim: int = 2, alpha: float = 0.3, kappa: float = 0.5):
        if n < 1 or dim < 1:
            raise ValueError("need n >= 1 and dim >= 1")
        self.n, self.dim, self.alpha, self.kappa = int(n), int(dim), float(alpha), float(kappa)
        self.d = self.d_w = self.n * self.dim

    @property
    def state_dependent_diffusion(self):
        return True

    def kernel_matrix(self, x):
        X = x.reshape(x.shape[0], self.n, self.dim)
        diff = X[:, :, None, :] - X[:, None, :, :]
        sq = np.einsum("nijk,nijk->nij", diff, diff)
        return 0.5 * self.alpha * np.exp(-sq / (2 * self.kappa**2))

    def drift(self, t, x):
        return np.zeros_like(x)

    def drift_vjp(self, t, x, g):
        return np.zeros_like(g)

    def diffusion(self, t, x):
        K = self.kernel_matrix(x)
        eye = np.eye(self.dim)
        return np.einsum("nij,ab->niajb", K, eye).reshape(x.shape[0], self.d, self.d)

    def diffusion_vjp(self, t, x, g):
        N = x.shape[0]
        K = self.kernel_matrix(x)
        cK = np.einsum("niaja->nij", g.reshape(N, self.n, self.dim, self.n, self.dim))
        W = (cK + np.swapaxes(cK, 1, 2)) * K
        X = x.reshape(N, self.n, self.dim)
        gX = -(W.sum(axis=2)[:, :, None] * X - W @ X) / self.kappa**2
        return gX.reshape(N, self.d)


def ellipse_landmarks(n: int, a: float, b: float, center=(0.0, 0.0), rotation: float = 0.0) -> np.ndarray:
    """``n`` points at equal angles on an ellipse, flattened landmark-major."""
    phi = 2 * np.pi * np.arange(n) / n
    pts = np.stack([a * np.cos(phi), b * np.sin(phi)], axis=1)
    c, s = np.cos(rotation), np.sin(rotation)
    pts = pts @ np.array([[c, -s], [s, c]]).T + np.asarray(center, dtype=float)
    return pts.reshape(-1)


MODELS = {
    "brownian": BrownianDriftModel,
    "ou": OuModel,
    "cell": CellModel,
    "fhn": FhnModel,
    "landmark": LandmarkModel,
}


def make_model(name: str, **params) -> SdeModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**params)


def auxiliary_for(model: SdeModel, obs: ObservationScheme) -> LinearAuxiliary:
    """The auxiliary process used for each model in the experiments."""
    if isinstance(model, (BrownianDriftModel, OuModel)):
        return LinearAuxiliary.scaled_brownian([[model.sigma]])
    if isinstance(model, CellModel):
        return LinearAuxiliary.constant(np.ones(2), -np.eye(2), model.sigma * np.eye(2))
    if isinstance(model, FhnModel):
        v = float(obs.v[0])
        chi = model.chi
        B = np.array([[(1.0 - 3 * v**2) / chi, -1.0 / chi], [model.gamma, -1.0]])
        beta = np.array([(2 * v**3 + model.s) / chi, model.alpha])
        return LinearAuxiliary.constant(beta, B, [[0.0], [model.sigma]])
    if isinstance(model, LandmarkModel):
        Qv = model.diffusion(obs.T, obs.v[None])[0]
        return LinearAuxiliary.constant(np.zeros(model.d), np.zeros((model.d, model.d)), Qv)
    if isinstance(model, LinearSdeModel):
        return LinearAuxiliary.constant(model.beta, model.B, model.sigma)
    raise UnsupportedModel(f"no default auxiliary for {type(model).__name__}")


def _require_linear(model):
    if not isinstance(model, (BrownianDriftModel, OuModel)):
        raise UnsupportedModel(f"no closed-form bridge for {type(model).__name__}")


def log_h(model, t: float, x, v: float, T: float, eps2: float = 0.0):
    """Exact ``log h(t, x) = log N(v; m_{t,T}(x), var_{t,T} + eps2)`` for a linear model."""
    _require_linear(model)
    mean, var = model.transition_mean_var(T - t, x)
    var = var + eps2
    return -0.5 * np.log(2 * np.pi * var) - (v - mean) ** 2 / (2 * var)


def analytic_bridge_drift(model, t: float, x, v: float, T: float):
    """Drift of the process conditioned on ``X_T = v`` (noise-free)."""
    _require_linear(model)
    if not t < T:
        raise ValueError("bridge drift is defined for t < T only")
    x = np.asarray(x, dtype=float)
    tau = T - t
    if isinstance(model, BrownianDriftModel):
        return (v - x) / tau
    g, mu = model.gamma, model.mu
    e = np.exp(-g * tau)
    return g * (mu - x) + 2 * g * e / (1 - e * e) * ((v - mu) - e * (x - mu))


def optimal_theta_and_bound(model, obs: ObservationScheme, x0) -> tuple:
    """Closed-form optimal correction and loss lower bound.

    Assumes the scaled-Brownian auxiliary with ``sigma_tilde = sigma``. The
    correction is ``sigma * (d/dx log h - d/dx log h~)``; the bound is
    ``log h~(0, x0) - log h(0, x0)``. Both include the observation variance.
    """
    _require_linear(model)
    if obs.d_obs != 1 or obs.L_obs[0, 0] != 1.0:
        raise UnsupportedModel("closed forms assume a direct scalar observation")
    v, T, eps2 = float(obs.v[0]), obs.T, float(obs.Sigma[0, 0])
    sigma = model.sigma

    def theta_opt(t, x):
        x = np.asarray(x, dtype=float)
        tau = T - t
        mean, var = model.transition_mean_var(tau, x)
        slope = np.exp(-model.gamma * tau) if isinstance(model, OuModel) else 1.0
        score = slope * (v - mean) / (var + eps2)
        score_tilde = (v - x) / (sigma**2 * tau + eps2)
        return sigma * (score - score_tilde)

    x0 = float(np.asarray(x0).reshape(-1)[0])
    log_h_tilde = log_h(BrownianDriftModel(0.0, sigma), 0.0, x0, v, T, eps2)
    bound = float(log_h_tilde - log_h(model, 0.0, x0, v, T, eps2))
    return theta_opt, bound


def brownian_bound(gamma, sigma, x0, v, T) -> float:
    """``((v - x0 - gamma T)^2 - (v - x0)^2) / (2 sigma^2 T)``."""
    return ((v - x0 - gamma * T) ** 2 - (v - x0) ** 2) / (2 * sigma**2 * T)


def ou_bound(gamma, mu, sigma, x0, v, T) -> float:
    """Noise-free lower bound for the OU bridge with a scaled-Brownian auxiliary."""
    m = mu + (x0 - mu) * math.exp(-gamma * T)
    S2 = sigma**2 / (2 * gamma) * (1 - math.exp(-2 * gamma * T))
    return (
        -0.5 * math.log(2 * math.pi * sigma**2 * T)
        - (v - x0) ** 2 / (2 * sigma**2 * T)
        + 0.5 * math.log(2 * math.pi * S2)
        + (v - m) ** 2 / (2 * S2)
    )
