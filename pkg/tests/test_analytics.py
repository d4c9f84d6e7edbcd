"""Histograms, total variation, mode counts and summaries."""
import numpy as np
import pytest
from conftest import brownian_system
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgesim.analytics import (
    BinMismatch,
    EmptyInput,
    MarginalHistogram,
    endpoint_report,
    loss_summary,
    marginal_histogram,
    marginal_values,
    mode_count,
    padded_edges,
    shared_histograms,
    tv_distance,
)
from bridgesim.conditioning import ObservationScheme
from bridgesim.guided import sample_guided_batch
from bridgesim.sde import TimeGrid, wiener_increments

GRID = TimeGrid(1.0, 10)


def _paths(values):
    """Paths constant in time whose marginal is ``values`` at every node."""
    v = np.asarray(values, dtype=float)
    return np.repeat(v[:, None, None], GRID.M + 1, axis=1)


def _hist(values, edges):
    counts, _ = np.histogram(values, edges)
    return MarginalHistogram(0.0, np.asarray(edges, dtype=float), counts, int(counts.sum()))


def test_constant_data_fills_one_bin():
    h = marginal_histogram(_paths(np.full(100, 0.7)), GRID, 0.5)
    assert np.count_nonzero(h.counts) == 1
    assert h.counts.sum() == 100
    assert h.edges[0] < 0.7 < h.edges[-1]


def test_symmetric_two_point_data():
    h = marginal_histogram(_paths([-1.0] * 50 + [1.0] * 50), GRID, 0.5)
    nz = h.counts[h.counts > 0]
    assert list(nz) == [50, 50]
    assert len(h.edges) == 51
    np.testing.assert_allclose(h.edges[0], -1.1)
    np.testing.assert_allclose(h.edges[-1], 1.1)


def test_density_integrates_to_one():
    rng = np.random.default_rng(0)
    h = marginal_histogram(_paths(rng.normal(size=1000)), GRID, 0.3)
    assert np.sum(h.density * h.widths) == pytest.approx(1.0)


def test_brownian_bridge_midpoint_variance():
    # a Brownian bridge from 0 to 0 on [0, 1] has Var X_{1/2} = 1/4
    sys_ = brownian_system(gamma=0.0, v=0.0, M=100, eps2=1e-10)
    dw = wiener_increments(sys_.grid, 1, 0, range(50_000))
    vals = marginal_values(sample_guided_batch(sys_, dw).states, sys_.grid, 0.5)
    se = 0.25 * np.sqrt(2.0 / (vals.size - 1))
    assert abs(vals.var(ddof=1) - 0.25) < 3 * se


def test_tv_identity_and_disjoint_support():
    edges = np.linspace(0, 4, 5)
    a = _hist([0.5, 0.5, 1.5], edges)
    assert tv_distance(a, a) == 0.0
    b = _hist([2.5, 3.5], edges)
    assert tv_distance(a, b) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=6, max_size=6), st.lists(st.integers(0, 50), min_size=6, max_size=6),
       st.lists(st.integers(0, 50), min_size=6, max_size=6))
def test_tv_is_a_metric_on_histograms(ca, cb, cc):
    edges = np.arange(7.0)
    hs = []
    for c in (ca, cb, cc):
        c = np.array(c)
        if c.sum() == 0:
            c[0] = 1
        hs.append(MarginalHistogram(0.0, edges, c, int(c.sum())))
    a, b, c = hs
    ab = tv_distance(a, b)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(tv_distance(b, a))
    assert tv_distance(a, c) <= ab + tv_distance(b, c) + 1e-12


def test_tv_invariant_to_sample_order():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=300), rng.normal(0.5, 1.0, size=300)
    ha, hb = shared_histograms(_paths(a), _paths(b), GRID, 0.5)
    ha2, hb2 = shared_histograms(_paths(rng.permutation(a)), _paths(rng.permutation(b)), GRID, 0.5)
    assert tv_distance(ha, hb) == tv_distance(ha2, hb2)


def test_tv_needs_shared_bins():
    a = _hist([0.5], np.linspace(0, 1, 5))
    b = _hist([0.5], np.linspace(0, 1, 6))
    with pytest.raises(BinMismatch):
        tv_distance(a, b)
    c = _hist([0.5], np.linspace(0, 1.1, 5))
    with pytest.raises(BinMismatch):
        tv_distance(a, c)


def test_empty_inputs():
    with pytest.raises(EmptyInput):
        padded_edges([])
    with pytest.raises(EmptyInput):
        marginal_histogram(np.empty((0, 11, 1)), GRID, 0.5)
    with pytest.raises(EmptyInput):
        marginal_histogram(_paths([np.nan, np.inf]), GRID, 0.5)
    with pytest.raises(EmptyInput):
        loss_summary([])


def test_time_and_grid_checks():
    with pytest.raises(ValueError):
        marginal_values(_paths([0.0]), GRID, 1.5)
    with pytest.raises(ValueError):
        marginal_values(np.zeros((3, 5, 1)), GRID, 0.5)


def test_explicit_edges_drop_outliers():
    h = marginal_histogram(_paths([0.1, 0.2, 5.0]), GRID, 0.0, bins=np.linspace(0, 1, 3))
    assert h.n_samples == 2


def test_mode_count_unimodal_and_bimodal():
    rng = np.random.default_rng(2)
    one = rng.normal(size=20_000)
    two = np.concatenate([rng.normal(-3, 0.5, 10_000), rng.normal(3, 0.5, 10_000)])
    assert mode_count(marginal_histogram(_paths(one), GRID, 0.5)) == 1
    assert mode_count(marginal_histogram(_paths(two), GRID, 0.5)) == 2


def test_mode_in_edge_bin_counts():
    edges = np.linspace(0, 3, 4)
    assert mode_count(_hist([0.5] * 10 + [1.5] * 2 + [2.5] * 5, edges)) == 2


def test_endpoint_report():
    obs = ObservationScheme.isotropic([[1.0, 0.0]], [1.0], 1e-4, 1.0)
    states = np.zeros((2, 3, 2))
    states[0, -1] = [1.5, 9.0]
    states[1, -1] = [0.0, -4.0]
    rep = endpoint_report(states, obs)
    assert rep.mean_error == 0.75 and rep.max_error == 1.0 and rep.n_paths == 2


def test_loss_summary():
    out = loss_summary(np.arange(10.0), window=4, lower_bound=6.0)
    assert out["final_mean"] == 7.5
    assert out["gap"] == 1.5
    assert out["final_se"] == pytest.approx(np.std([6, 7, 8, 9], ddof=1) / 2)
