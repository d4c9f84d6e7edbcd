"""Backward ODEs, the guiding score and the observation scheme."""
import warnings

import numpy as np
import pytest
from scipy.integrate import quad_vec
from scipy.linalg import expm
from scipy.stats import multivariate_normal

from bridgesim.conditioning import (
    JITTERS,
    LinearAuxiliary,
    MatchingWarning,
    ObservationScheme,
    SingularMdag,
    check_matching,
    guiding_score,
    neg_hessian,
    solve_backward_odes,
    spd_inverse,
)
from bridgesim.models import CellModel, FhnModel, auxiliary_for
from bridgesim.sde import TimeGrid


def _solve(aux, L, v, eps2, T, M):
    obs = ObservationScheme.isotropic(L, v, eps2, T)
    return obs, solve_backward_odes(aux, obs, TimeGrid(T, M))


# ---------------------------------------------------------------- observation scheme


def test_observation_scheme_validation():
    with pytest.raises(ValueError):
        ObservationScheme([[1.0, 0.0], [2.0, 0.0]], 1e-4 * np.eye(2), [0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        ObservationScheme([[1.0, 0.0]], [[-1.0]], [0.0], 1.0)
    with pytest.raises(ValueError):
        ObservationScheme([[1.0, 0.0]], [[1.0]], [0.0, 1.0], 1.0)


def test_grid_horizon_must_match():
    obs = ObservationScheme.isotropic([[1.0]], [0.0], 1e-4, 1.0)
    with pytest.raises(ValueError):
        solve_backward_odes(LinearAuxiliary.scaled_brownian([[1.0]]), obs, TimeGrid(2.0, 10))


# ---------------------------------------------------------------- closed forms


def test_terminal_conditions_are_exact():
    aux = auxiliary_for(FhnModel(), ObservationScheme.isotropic([[1.0, 0.0]], [-1.0], 1e-8, 2.0))
    obs, sol = _solve(aux, [[1.0, 0.0]], [-1.0], 1e-8, 2.0, 50)
    assert np.array_equal(sol.L_t[-1], obs.L_obs)
    assert np.array_equal(sol.Mdag_t[-1], obs.Sigma)
    assert np.array_equal(sol.u_t[-1], np.zeros(1))


def test_scaled_brownian_mdag_closed_form():
    # M^dagger(t) = eps^2 + sigma^2 (T - t), L(t) = 1, u(t) = 0
    sigma, eps2, T = 0.7, 1e-4, 2.0
    _, sol = _solve(LinearAuxiliary.scaled_brownian([[sigma]]), [[1.0]], [0.3], eps2, T, 100)
    t = sol.grid.nodes
    np.testing.assert_allclose(sol.Mdag_t[:, 0, 0], eps2 + sigma**2 * (T - t), atol=1e-10)
    np.testing.assert_allclose(sol.L_t[:, 0, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.u_t[:, 0], 0.0, atol=1e-12)


def test_drift_matrix_gives_matrix_exponential():
    # B = -I: dL/dt = -L B gives L(t) = L expm(B (T - t)) = e^{-(T - t)} I
    d, T = 2, 1.5
    aux = LinearAuxiliary.constant(np.zeros(d), -np.eye(d), 0.2 * np.eye(d))
    _, sol = _solve(aux, np.eye(d), [0.0, 0.0], 1e-6, T, 150)
    for m, t in enumerate(sol.grid.nodes):
        np.testing.assert_allclose(sol.L_t[m], expm(-np.eye(d) * (T - t)), atol=1e-9)


def test_constant_coefficient_solution_matches_quadrature():
    # general linear auxiliary: compare against
    # L(t) = L e^{B tau}, u(t) = int L e^{B(T-s)} beta ds,
    # M^dagger(t) = Sigma + int L e^{B(T-s)} a e^{B^T(T-s)} L^T ds
    beta = np.array([0.3, -0.4])
    B = np.array([[-0.8, 0.5], [-0.2, -0.3]])
    sig = np.array([[0.3, 0.1], [0.0, 0.2]])
    a = sig @ sig.T
    Lobs = np.array([[1.0, 0.5]])
    T, eps2 = 1.2, 1e-3
    aux = LinearAuxiliary.constant(beta, B, sig)
    _, sol = _solve(aux, Lobs, [0.2], eps2, T, 120)
    for m in (0, 30, 90):
        t = sol.grid.nodes[m]
        Phi = lambda s: Lobs @ expm(B * (T - s))  # noqa: E731
        u = quad_vec(lambda s: Phi(s) @ beta, t, T)[0]
        Mdag = eps2 + quad_vec(lambda s: Phi(s) @ a @ Phi(s).T, t, T)[0]
        np.testing.assert_allclose(sol.L_t[m], Phi(t), atol=1e-8)
        np.testing.assert_allclose(sol.u_t[m], u, atol=1e-8)
        np.testing.assert_allclose(sol.Mdag_t[m], Mdag, atol=1e-8)


def test_cell_auxiliary_closed_form():
    # beta = 1, B = -I, sigma~ = s I: L = e^{-tau} I, u = (1 - e^{-tau}) 1,
    # M^dagger = eps^2 + s^2 (1 - e^{-2 tau}) / 2
    obs = ObservationScheme.isotropic(np.eye(2), [2.0, -0.1], 1e-10, 4.0)
    aux = auxiliary_for(CellModel(0.1), obs)
    sol = solve_backward_odes(aux, obs, TimeGrid(4.0, 400))
    tau = 4.0 - sol.grid.nodes
    e = np.exp(-tau)
    np.testing.assert_allclose(sol.L_t[:, 0, 0], e, atol=1e-10)
    np.testing.assert_allclose(sol.u_t[:, 0], 1 - e, atol=1e-10)
    np.testing.assert_allclose(sol.Mdag_t[:, 0, 0], 1e-10 + 0.01 * (1 - e * e) / 2, atol=1e-10)


# ---------------------------------------------------------------- structural invariants


@pytest.fixture(scope="module")
def general_solution():
    aux = LinearAuxiliary.constant([0.1, 0.2, -0.1], -0.5 * np.eye(3) + 0.1, 0.3 * np.eye(3))
    return _solve(aux, [[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]], [0.5, -0.5], 1e-4, 1.0, 60)


def test_inverse_and_symmetry(general_solution):
    _, sol = general_solution
    eye = np.eye(2)
    for m in range(sol.grid.M + 1):
        np.testing.assert_allclose(sol.M_t[m] @ sol.Mdag_t[m], eye, atol=1e-9)
        assert np.array_equal(sol.Mdag_t[m], sol.Mdag_t[m].T)
        assert np.array_equal(sol.H[m], sol.H[m].T)


def test_mdag_is_loewner_decreasing_in_time(general_solution):
    # with a~ PSD, M^dagger(s) - M^dagger(t) is PSD for s < t
    _, sol = general_solution
    for m in range(sol.grid.M):
        gap = sol.Mdag_t[m] - sol.Mdag_t[m + 1]
        assert np.linalg.eigvalsh(gap).min() > -1e-12


def test_arrays_are_read_only(general_solution):
    _, sol = general_solution
    with pytest.raises(ValueError):
        sol.H[0, 0, 0] = 1.0


# ---------------------------------------------------------------- guiding score


def test_score_vanishes_at_zero_residual(general_solution):
    obs, sol = general_solution
    m = 20
    # pick x with L(t) x = v - u(t)
    x = np.linalg.lstsq(sol.L_t[m], obs.v - sol.u_t[m], rcond=None)[0]
    np.testing.assert_allclose(guiding_score(sol, obs, m, x), 0.0, atol=1e-12)


def test_score_is_affine_with_slope_minus_h(general_solution):
    obs, sol = general_solution
    rng = np.random.default_rng(0)
    m = 17
    x, dx = rng.normal(size=3), rng.normal(size=3)
    lhs = guiding_score(sol, obs, m, x + dx) - guiding_score(sol, obs, m, x)
    np.testing.assert_allclose(lhs, -neg_hessian(sol, m) @ dx, atol=1e-12)
    # the cached (c, H) representation agrees with the direct formula
    np.testing.assert_allclose(sol.c[m] - sol.H[m] @ x, guiding_score(sol, obs, m, x), atol=1e-12)


def test_score_is_gradient_of_log_h_tilde(general_solution):
    obs, sol = general_solution
    rng = np.random.default_rng(1)
    m, x, h = 10, rng.normal(size=3), 1e-6
    fd = np.array(
        [
            (sol.log_h_tilde(m, (x + h * e)[None], obs.v)[0] - sol.log_h_tilde(m, (x - h * e)[None], obs.v)[0]) / (2 * h)
            for e in np.eye(3)
        ]
    )
    np.testing.assert_allclose(guiding_score(sol, obs, m, x), fd, rtol=1e-6, atol=1e-6)


def test_log_h_tilde_is_gaussian_density(general_solution):
    obs, sol = general_solution
    x = np.array([0.3, -0.2, 0.1])
    m = 5
    mean = sol.u_t[m] + sol.L_t[m] @ x
    ref = multivariate_normal(mean, sol.Mdag_t[m]).logpdf(obs.v)
    assert abs(sol.log_h_tilde(m, x[None], obs.v)[0] - ref) < 1e-10


def test_brownian_score_small_noise_limit():
    # eps -> 0: r~(t, x) -> (v - x) / (sigma^2 (T - t))
    sigma, T, v = 1.3, 1.0, 0.4
    obs, sol = _solve(LinearAuxiliary.scaled_brownian([[sigma]]), [[1.0]], [v], 1e-14, T, 50)
    for m in (0, 10, 40):
        x = np.array([-0.2])
        tau = T - sol.grid.nodes[m]
        np.testing.assert_allclose(guiding_score(sol, obs, m, x), (v - x) / (sigma**2 * tau), rtol=1e-9)


def test_direct_observation_hessian_at_zero():
    # L = I, sigma = 1, T = 1: H(0) = 1 / (1 + eps^2)
    _, sol = _solve(LinearAuxiliary.scaled_brownian([[1.0]]), [[1.0]], [0.0], 1e-14, 1.0, 100)
    assert abs(sol.H[0, 0, 0] - 1.0) < 1e-12
    np.testing.assert_array_equal(sol.H, sol.M_t)  # L = I leaves H = M


def test_score_index_checks(general_solution):
    obs, sol = general_solution
    with pytest.raises(IndexError):
        guiding_score(sol, obs, sol.grid.M + 1, np.zeros(3))
    with pytest.raises(IndexError):
        neg_hessian(sol, -1)


# ---------------------------------------------------------------- inversion and matching


def test_spd_inverse_uses_jitter_on_semidefinite_input():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])  # singular PSD
    inv = spd_inverse(A)
    assert np.isfinite(inv).all()
    assert JITTERS[0] == 0.0


def test_spd_inverse_exact_on_well_conditioned_input():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(spd_inverse(A), np.linalg.inv(A), rtol=1e-14)


def test_spd_inverse_raises_on_indefinite_input():
    with pytest.raises(SingularMdag):
        spd_inverse(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_matching_warning():
    obs = ObservationScheme.isotropic(np.eye(2), [1.0, 1.0], 1e-10, 1.0)
    model = CellModel(0.1)
    matched = LinearAuxiliary.constant(np.ones(2), -np.eye(2), 0.1 * np.eye(2))
    mismatched = LinearAuxiliary.constant(np.ones(2), -np.eye(2), 0.2 * np.eye(2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_matching(model, matched, obs)
    with pytest.warns(MatchingWarning):
        assert not check_matching(model, mismatched, obs)
