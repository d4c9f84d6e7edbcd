"""Shared builders and session-scoped training runs.

The Brownian and OU training runs are expensive, so they are trained once
per session and reused by the module tests and the acceptance suite.
"""
import numpy as np
import pytest

from bridgesim.conditioning import LinearAuxiliary, ObservationScheme
from bridgesim.config import load_config
from bridgesim.guided import GuidedSystem, sample_neural_states
from bridgesim.models import (
    BrownianDriftModel,
    CellModel,
    FhnModel,
    LandmarkModel,
    LinearSdeModel,
    OuModel,
    auxiliary_for,
    ellipse_landmarks,
)
from bridgesim.sde import TimeGrid, wiener_increments
from bridgesim.training import TrainConfig, train


def build_system(model, x0, L, v, eps2, T, M, aux=None):
    obs = ObservationScheme.isotropic(L, v, eps2, T)
    aux = auxiliary_for(model, obs) if aux is None else aux
    return GuidedSystem.build(model, aux, obs, TimeGrid(T, M), x0)


def brownian_system(gamma=1.0, sigma=1.0, x0=0.0, v=0.0, T=1.0, M=100, eps2=1e-10):
    return build_system(BrownianDriftModel(gamma, sigma), [x0], [[1.0]], [v], eps2, T, M)


def ou_system(M=100, eps2=1e-10):
    return build_system(OuModel(1.7, 1.0, 0.3), [0.0], [[1.0]], [1.0], eps2, 1.0, M)


def cell_system(M=50, v=(2.0, -0.1), T=4.0, eps2=1e-10):
    return build_system(CellModel(0.1), [0.1, -0.1], np.eye(2), v, eps2, T, M)


def fhn_system(M=50, v=-1.0, T=2.0, eps2=1e-8):
    return build_system(FhnModel(), [-0.5, -0.6], [[1.0, 0.0]], [v], eps2, T, M)


def landmark_system(n=4, M=20, eps2=2e-3):
    model = LandmarkModel(n)
    return build_system(
        model, ellipse_landmarks(n, 1.0, 0.5), np.eye(model.d), ellipse_landmarks(n, 0.5, 1.0), eps2, 1.0, M
    )


def linear_identity_system(M=50, T=1.0, eps2=1e-4):
    """A linear model whose auxiliary is the model itself, so ``G`` vanishes identically."""
    beta, B = np.array([0.5, -0.2]), np.array([[-1.0, 0.3], [0.1, -0.5]])
    sigma = np.array([[0.4, 0.0], [0.1, 0.3]])
    model = LinearSdeModel(beta, B, sigma)
    aux = LinearAuxiliary.constant(beta, B, sigma)
    return build_system(model, [0.2, -0.1], np.eye(2), [1.0, 0.5], eps2, T, M, aux)


ZOO = {
    "brownian": lambda: brownian_system(M=10),
    "ou": lambda: ou_system(M=10),
    "cell": lambda: cell_system(M=10),
    "fhn": lambda: fhn_system(M=20, T=0.5),
    "landmark": lambda: landmark_system(n=3, M=8),
}


def supported_grid(sys_, params, n=20, n_paths=2000):
    """``n`` times in (0, 0.95 T], each with ``n`` points spanning mean +- 2 sd of the learned bridge."""
    dw = wiener_increments(sys_.grid, sys_.d_w, 12345, range(n_paths))
    states = sample_neural_states(sys_, params, dw)[:, :, 0]
    idx = np.unique(np.round(np.linspace(1, 0.95 * sys_.grid.M, n)).astype(int))
    for m in idx:
        mean, sd = states[:, m].mean(), states[:, m].std()
        yield sys_.grid.nodes[m], mean + np.linspace(-2 * sd, 2 * sd, n)


@pytest.fixture(scope="session")
def brownian_trace():
    """Brownian bridge (gamma = 1) trained for 500 iterations at N = 50."""
    cfg = load_config("brownian")
    tc = TrainConfig(**{**cfg.train.to_dict(), "iterations": 500, "batch_size": 50})
    sys_ = cfg.system()
    return sys_, train(sys_, cfg.arch, tc)


@pytest.fixture(scope="session")
def ou_trace():
    """OU bridge trained with the bundled configuration (1000 iterations, N = 50)."""
    cfg = load_config("ou_bridge")
    sys_ = cfg.system()
    return sys_, train(sys_, cfg.arch, cfg.train)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    """Store one acceptance result for the end-of-session report, then assert it."""
    ACCEPTANCE[number] = (title, bool(passed), detail)
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
