"""The bounded MLP correction, its evaluators and checkpoints."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgesim import autodiff as ad
from bridgesim.network import (
    MlpArchitecture,
    NeuralDriftParams,
    ThetaEvaluator,
    lipschitz_bound,
    lipswish,
    load_checkpoint,
    save_checkpoint,
    theta_forward,
    theta_op,
)


def _power_iteration(W, iters=500):
    v = np.random.default_rng(0).normal(size=W.shape[1])
    for _ in range(iters):
        v = W.T @ (W @ v)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(W @ v))


def test_architecture_shapes_and_count():
    arch = MlpArchitecture(2, 1, (32, 32, 32, 32), "lipswish")
    assert arch.widths == (3, 32, 32, 32, 32, 1)
    assert arch.n_params == 3 * 32 + 32 + 3 * (32 * 32 + 32) + 32 + 1
    assert arch.cap == 10.0


@pytest.mark.parametrize(
    "kw", [dict(hidden=()), dict(hidden=(0,)), dict(activation="relu"), dict(cap=-1.0), dict(horizon=0.0)]
)
def test_architecture_validation(kw):
    with pytest.raises(ValueError):
        MlpArchitecture(2, 2, **kw)


def test_parameter_count_is_checked():
    arch = MlpArchitecture(1, 1, (3,))
    with pytest.raises(ValueError):
        NeuralDriftParams(arch, np.zeros(arch.n_params + 1))


def test_zero_network_outputs_zero():
    for act in ("tanh", "lipswish"):
        params = NeuralDriftParams.zeros(MlpArchitecture(3, 2, (8, 8), act))
        x = np.random.default_rng(0).normal(size=(10, 3))
        assert np.all(theta_forward(params, 0.4, x) == 0.0)
        assert np.all(ThetaEvaluator(params)(0.4, x) == 0.0)


def test_lipswish_values_and_derivative():
    assert lipswish(0.0) == 0.0
    z = np.linspace(-8, 8, 101)
    np.testing.assert_allclose(lipswish(z), z / (1 + np.exp(-z)) / 1.1, rtol=1e-12, atol=0)
    # derivative is bounded by 1, which makes the activation 1-Lipschitz
    h = 1e-6
    d = (lipswish(z + h) - lipswish(z - h)) / (2 * h)
    assert np.abs(d).max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e6, 1e6), st.integers(0, 1000))
def test_output_is_bounded_by_cap(scale, seed):
    arch = MlpArchitecture(2, 2, (4,), "tanh", cap=3.0)
    params = NeuralDriftParams(arch, np.random.default_rng(seed).normal(size=arch.n_params) * 50)
    x = np.full((1, 2), scale)
    assert np.abs(theta_forward(params, 0.5, x)).max() <= 3.0


def test_evaluator_matches_reference_forward():
    for act in ("tanh", "lipswish"):
        arch = MlpArchitecture(4, 3, (16, 8, 8), act, horizon=2.0)
        params = NeuralDriftParams.init(arch, 5)
        params.flat[:] += np.random.default_rng(1).normal(scale=0.1, size=arch.n_params)
        x = np.random.default_rng(2).normal(size=(7, 4))
        ev = ThetaEvaluator(params)
        for t in (0.0, 0.7, 2.0, 0.7):
            np.testing.assert_allclose(ev(t, x), theta_forward(params, t, x), rtol=1e-12, atol=1e-13)


def test_theta_forward_accepts_single_points():
    params = NeuralDriftParams.init(MlpArchitecture(2, 1, (4,)), 0)
    x = np.array([0.1, 0.2])
    np.testing.assert_array_equal(theta_forward(params, 0.3, x), theta_forward(params, 0.3, x[None])[0])


def test_theta_op_gradients_match_finite_differences():
    arch = MlpArchitecture(2, 2, (5, 4), "lipswish", cap=2.0)
    params = NeuralDriftParams.init(arch, 3)
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 2))
    c = rng.normal(size=(3, 2))

    def scalar(flat, x):
        return float(np.sum(c * theta_forward(NeuralDriftParams(arch, flat), 0.6, x)))

    tape = ad.Tape()
    tv, xv = tape.leaf(params.flat), tape.leaf(x0)
    out = ad.total(theta_op(params, tv, 0.6, xv) * c)
    gflat, gx = tape.gradient(out, [tv, xv])
    h = 1e-6
    fd_flat = np.array([(scalar(params.flat + h * e, x0) - scalar(params.flat - h * e, x0)) / (2 * h) for e in np.eye(arch.n_params)])
    np.testing.assert_allclose(gflat, fd_flat, rtol=1e-6, atol=1e-9)
    fd_x = np.array(
        [
            [(scalar(params.flat, x0 + h * E) - scalar(params.flat, x0 - h * E)) / (2 * h) for E in _units(x0, i)]
            for i in range(x0.shape[0])
        ]
    )
    np.testing.assert_allclose(gx, fd_x, rtol=1e-6, atol=1e-9)


def _units(x, row):
    out = []
    for j in range(x.shape[1]):
        E = np.zeros_like(x)
        E[row, j] = 1.0
        out.append(E)
    return out


def test_lipschitz_bound_against_power_iteration_and_probes():
    arch = MlpArchitecture(2, 2, (32, 32, 32), "lipswish")
    params = NeuralDriftParams.init(arch, 7)
    params.flat[:] *= 1.5
    expected = np.prod([_power_iteration(W) for W, _ in params.layers()])
    bound = lipschitz_bound(params)
    assert abs(bound - expected) < 1e-8 * expected
    # no pair of inputs stretches further than the bound
    rng = np.random.default_rng(0)
    for _ in range(200):
        t1, t2 = rng.uniform(0, 1, 2)
        x1, x2 = rng.normal(size=2), rng.normal(size=2)
        num = np.linalg.norm(theta_forward(params, t1, x1) - theta_forward(params, t2, x2))
        den = np.linalg.norm(np.concatenate([[t1 - t2], x1 - x2]))
        assert num <= bound * den + 1e-12


def test_init_is_deterministic_and_glorot_scaled():
    arch = MlpArchitecture(3, 2, (64, 64))
    a, b = NeuralDriftParams.init(arch, 1), NeuralDriftParams.init(arch, 1)
    assert np.array_equal(a.flat, b.flat)
    for (W, bias), ((fo, fi), _) in zip(a.layers(), arch.shapes):
        assert np.abs(W).max() <= np.sqrt(6.0 / (fi + fo))
        assert np.all(bias == 0.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    arch = MlpArchitecture(2, 1, (7, 5), "lipswish", horizon=2.0)
    params = NeuralDriftParams(arch, np.random.default_rng(0).normal(size=arch.n_params) * np.pi, 0.7)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, params, {"name": "x"})
    loaded, cfg = load_checkpoint(path)
    assert np.array_equal(loaded.flat, params.flat)
    assert loaded.arch == arch
    assert loaded.clip_norm == 0.7
    assert cfg == {"name": "x"}


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "bridgesim-checkpoint", "version": 99}))
    with pytest.raises(ValueError):
        load_checkpoint(path)
