"""The learnable drift correction: a small MLP with a bounded output.

The network maps ``(t / T, x)`` to ``R^{d_w}``; its last layer is squashed
as ``cap * tanh(z / cap)`` so the correction is bounded by ``cap`` in every
coordinate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("tanh", "lipswish")
CHECKPOINT_FORMAT = "bridgesim-checkpoint"
CHECKPOINT_VERSION = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lipswish(z):
    return z * _sigmoid(z) / 1.1


def _activate(name, z, need_grad=True):
    """Activation and (optionally) its derivative; overwrites ``z``'s buffer only via copies."""
    if name == "tanh":
        h = np.tanh(z)
        if not need_grad:
            return h, None
        d = h * h
        np.subtract(1.0, d, out=d)
        return h, d
    s = np.multiply(z, 0.5)
    np.tanh(s, out=s)
    s *= 0.5
    s += 0.5
    h = z * s
    if not need_grad:
        h *= 1.0 / 1.1
        return h, None
    # d/dz z s(z) = s + z s (1 - s)
    d = 1.0 - s
    d *= h
    d += s
    d *= 1.0 / 1.1
    h *= 1.0 / 1.1
    return h, d


@dataclass(frozen=True)
class MlpArchitecture:
    state_dim: int
    output_dim: int
    hidden: tuple = (32, 32, 32)
    activation: str = "tanh"
    cap: float | None = None
    horizon: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("need at least one hidden layer, all widths >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.cap is None:
            object.__setattr__(self, "cap", 10.0 * np.sqrt(self.output_dim))
        if not self.cap > 0 or not self.horizon > 0:
            raise ValueError("cap and horizon must be positive")

    @property
    def input_dim(self) -> int:
        return 1 + self.state_dim

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def shapes(self) -> list:
        w = self.widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + a for (a, b), _ in self.shapes)


@dataclass
class NeuralDriftParams:
    """Flat parameter vector with per-layer views ``(W, b)``."""

    arch: MlpArchitecture
    flat: np.ndarray
    clip_norm: float = 1.0
    _layers: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=float)
        if self.flat.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.flat.shape}")
        self._layers = split_layers(self.arch, self.flat)

    def layers(self):
        return self._layers

    def copy(self) -> "NeuralDriftParams":
        return NeuralDriftParams(self.arch, self.flat.copy(), self.clip_norm)

    @classmethod
    def zeros(cls, arch: MlpArchitecture) -> "NeuralDriftParams":
        return cls(arch, np.zeros(arch.n_params))

    @classmethod
    def init(cls, arch: MlpArchitecture, seed: int = 0) -> "NeuralDriftParams":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for (fan_out, fan_in), _ in arch.shapes:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-lim, lim, size=fan_out * fan_in))
            chunks.append(np.zeros(fan_out))
        return cls(arch, np.concatenate(chunks))


def split_layers(arch: MlpArchitecture, flat: np.ndarray) -> list:
    out, k = [], 0
    for (a, b), _ in arch.shapes:
        W = flat[k : k + a * b].reshape(a, b)
        k += a * b
        out.append((W, flat[k : k + a]))
        k += a
    return out


def _forward(arch, layers, t, x, need_grad=True):
    n = x.shape[0]
    # the time input enters as a rank-one bias, so only x goes through a matmul
    W0, b0 = layers[0]
    z = x @ W0[:, 1:].T
    z += b0 + (t / arch.horizon) * W0[:, 0]
    inputs, derivs = [None], []
    h, dh = _activate(arch.activation, z, need_grad)
    derivs.append(dh)
    for W, b in layers[1:-1]:
        inputs.append(h)
        z = h @ W.T
        z += b
        h, dh = _activate(arch.activation, z, need_grad)
        derivs.append(dh)
    W, b = layers[-1]
    inputs.append(h)
    sq = h @ W.T
    sq += b
    sq *= 1.0 / arch.cap
    np.tanh(sq, out=sq)
    if need_grad:
        inp = np.empty((n, arch.input_dim))
        inp[:, 0] = t / arch.horizon
        inp[:, 1:] = x
        inputs[0] = inp
    return arch.cap * sq, inputs, derivs, sq


def theta_forward(params: NeuralDriftParams, t: float, x) -> np.ndarray:
    """Evaluate the correction at time ``t`` for ``x`` of shape (d,) or (N, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = _forward(params.arch, params.layers(), t, np.atleast_2d(x), need_grad=False)[0]
    return out[0] if single else out


class ThetaEvaluator:
    """Gradient-free evaluation of a frozen parameter set, tuned for sampling.

    Weights are transposed once and the constant factors of LipSwish are
    folded into them: with ``u = z / 2`` one has
    ``lipswish(z) = (u + u tanh u) / 1.1``, so each hidden layer costs one
    matmul, one bias add and three elementwise calls.
    """

    def __init__(self, params: NeuralDriftParams):
        arch = params.arch
        layers = params.layers()
        self.cap = arch.cap
        self.lipswish = arch.activation == "lipswish"
        pre = 0.5 if self.lipswish else 1.0  # scale applied to pre-activations
        post = 1.0 / 1.1 if self.lipswish else 1.0  # left over from the activation
        W0, b0 = layers[0]
        self.W0x = np.ascontiguousarray(pre * W0[:, 1:].T)
        self._w0t = pre * W0[:, 0] / arch.horizon
        self._b0 = pre * b0
        self._bias0 = {}
        self.hidden = [
            (np.ascontiguousarray(pre * post * W.T), pre * b) for W, b in layers[1:-1]
        ]
        Wf, bf = layers[-1]
        self.Wf = np.ascontiguousarray(post * Wf.T / arch.cap)
        self.bf = bf / arch.cap

    def _act(self, z):
        if self.lipswish:
            th = np.tanh(z)
            th *= z
            z += th
        else:
            np.tanh(z, out=z)
        return z

    def __call__(self, t, x):
        b0 = self._bias0.get(t)
        if b0 is None:
            b0 = self._bias0[t] = self._b0 + t * self._w0t
        z = x @ self.W0x
        z += b0
        h = self._act(z)
        for Wt, b in self.hidden:
            z = h @ Wt
            z += b
            h = self._act(z)
        z = h @ self.Wf
        z += self.bf
        np.tanh(z, out=z)
        z *= self.cap
        return z


def theta_op(params: NeuralDriftParams, theta_var, t: float, x):
    """Tape-aware MLP evaluation.

    ``theta_var`` is the tape leaf holding ``params.flat`` (or None for a
    plain evaluation). The VJP returns the cotangents of ``x`` and of the
    flat parameter vector.
    """
    arch = params.arch
    vx = ad.value(x)
    tape = ad._tape_of(x, theta_var)
    out, inputs, derivs, sq = _forward(arch, params.layers(), t, vx, need_grad=tape is not None)
    if tape is None:
        return out
    layers = params.layers()

    def vjp(g):
        gflat = np.empty(arch.n_params)
        gl = split_layers(arch, gflat)
        gz = g * (1.0 - sq * sq)
        for i in range(len(layers) - 1, -1, -1):
            W = layers[i][0]
            gW, gb = gl[i]
            np.matmul(gz.T, inputs[i], out=gW)
            np.sum(gz, axis=0, out=gb)
            gh = gz @ W
            if i > 0:
                gz = gh * derivs[i - 1]
        gx = gh[:, 1:] if isinstance(x, ad.Var) else None
        return gx, (gflat if theta_var is not None else None)

    return tape.record(out, (x, theta_var), vjp)


def lipschitz_bound(params: NeuralDriftParams) -> float:
    """Product of per-layer spectral norms.

    Both activations and the output squashing are 1-Lipschitz, so this bounds
    the Lipschitz constant of the network in ``(t/T, x)``.
    """
    return float(np.prod([np.linalg.norm(W, 2) for W, _ in params.layers()]))


def save_checkpoint(path, params: NeuralDriftParams, config: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": {**asdict(params.arch), "hidden": list(params.arch.hidden)},
        "clip_norm": params.clip_norm,
        "params": params.flat.tolist(),
    }
    if config is not None:
        payload["config"] = config
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[NeuralDriftParams, dict | None]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a bridgesim checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    arch = MlpArchitecture(**payload["arch"])
    params = NeuralDriftParams(arch, np.array(payload["params"], dtype=float), payload.get("clip_norm", 1.0))
    return params, payload.get("config")
