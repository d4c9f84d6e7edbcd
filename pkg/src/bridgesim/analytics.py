"""Marginal histograms, distances between them, mode counts and endpoint errors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .conditioning import ObservationScheme
from .sde import TimeGrid

DEFAULT_BINS = 50
PAD_FRACTION = 0.05
DEFAULT_PROMINENCE = 0.05


class EmptyInput(ValueError):
    """No samples to summarise."""


class BinMismatch(ValueError):
    """Histograms with different bin edges cannot be compared."""


@dataclass(frozen=True)
class MarginalHistogram:
    time: float
    edges: np.ndarray
    counts: np.ndarray
    n_samples: int
    coordinate: int = 0

    def __post_init__(self):
        if self.counts.shape != (len(self.edges) - 1,):
            raise ValueError("need one count per bin")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if int(self.counts.sum()) != self.n_samples:
            raise ValueError("counts must sum to n_samples")

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.n_samples

    @property
    def density(self) -> np.ndarray:
        return self.probabilities / self.widths

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "coordinate": self.coordinate,
            "n_samples": self.n_samples,
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "density": self.density.tolist(),
        }


def padded_edges(values, bins: int = DEFAULT_BINS, pad: float = PAD_FRACTION) -> np.ndarray:
    """``bins`` equal bins over the data range widened by ``pad`` of its span on each side."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyInput("no samples")
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    if span == 0.0:
        span = max(abs(lo), 1.0)
    return np.linspace(lo - pad * span, hi + pad * span, bins + 1)


def marginal_values(states, grid: TimeGrid, t: float, coordinate: int = 0) -> np.ndarray:
    """Coordinate ``coordinate`` of every path at the node nearest ``t``."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[0] == 0:
        raise EmptyInput("need a nonempty (N, M+1, d) array of paths")
    if states.shape[1] != grid.M + 1:
        raise ValueError(f"paths have {states.shape[1]} nodes, grid has {grid.M + 1}")
    if not 0.0 <= t <= grid.T:
        raise ValueError(f"t={t} is outside [0, {grid.T}]")
    return states[:, grid.nearest_index(t), coordinate]


def marginal_histogram(states, grid: TimeGrid, t: float, coordinate: int = 0, bins=DEFAULT_BINS) -> MarginalHistogram:
    """Histogram of one coordinate at time ``t``.

    ``bins`` is a count (range from the data, padded) or an explicit array of
    edges; samples outside explicit edges are dropped from the counts.
    """
    vals = marginal_values(states, grid, t, coordinate)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise EmptyInput("no finite samples")
    edges = padded_edges(vals, bins) if np.ndim(bins) == 0 else np.asarray(bins, dtype=float)
    counts, _ = np.histogram(vals, edges)
    return MarginalHistogram(float(grid.nodes[grid.nearest_index(t)]), edges, counts, int(counts.sum()), coordinate)


def tv_distance(h1: MarginalHistogram, h2: MarginalHistogram) -> float:
    """``1/2 sum |p_i - q_i|`` over shared bins."""
    if h1.edges.shape != h2.edges.shape or not np.allclose(h1.edges, h2.edges, rtol=1e-12, atol=0.0):
        raise BinMismatch("histograms have different bin edges")
    if h1.n_samples == 0 or h2.n_samples == 0:
        raise EmptyInput("empty histogram")
    return 0.5 * float(np.abs(h1.probabilities - h2.probabilities).sum())


def shared_histograms(a, b, grid: TimeGrid, t: float, coordinate: int = 0, bins: int = DEFAULT_BINS):
    """Histograms of two path sets on edges covering both samples."""
    va = marginal_values(a, grid, t, coordinate)
    vb = marginal_values(b, grid, t, coordinate)
    both = np.concatenate([va, vb])
    edges = padded_edges(both[np.isfinite(both)], bins)
    return (
        marginal_histogram(a, grid, t, coordinate, edges),
        marginal_histogram(b, grid, t, coordinate, edges),
    )


def mode_count(h: MarginalHistogram, min_prominence: float = DEFAULT_PROMINENCE) -> int:
    """Local maxima of the density with prominence above ``min_prominence`` times the peak."""
    dens = h.density
    peak = dens.max()
    if peak <= 0:
        return 0
    # zero padding lets a maximum in an edge bin count as a peak
    padded = np.concatenate([[0.0], dens, [0.0]])
    peaks, _ = find_peaks(padded, prominence=min_prominence * peak)
    return len(peaks)


@dataclass(frozen=True)
class EndpointReport:
    mean_error: float
    max_error: float
    n_paths: int

    def to_dict(self) -> dict:
        return {"mean_error": self.mean_error, "max_error": self.max_error, "n_paths": self.n_paths}


def endpoint_report(states, obs: ObservationScheme) -> EndpointReport:
    """Per-path Euclidean error ``|L x_M - v|`` summarised over paths."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[0] == 0:
        raise EmptyInput("need a nonempty (N, M+1, d) array of paths")
    err = np.linalg.norm(states[:, -1] @ obs.L_obs.T - obs.v, axis=1)
    return EndpointReport(float(err.mean()), float(err.max()), int(len(err)))


def loss_summary(losses, window: int = 100, lower_bound: float | None = None) -> dict:
    """Mean and standard error of the final ``window`` losses, and the gap to a bound."""
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise EmptyInput("empty loss trace")
    tail = losses[-window:]
    out = {
        "iterations": int(losses.size),
        "window": int(tail.size),
        "final_mean": float(tail.mean()),
        "final_se": float(tail.std(ddof=1) / np.sqrt(tail.size)) if tail.size > 1 else float("nan"),
    }
    if lower_bound is not None:
        out["lower_bound"] = float(lower_bound)
        out["gap"] = out["final_mean"] - float(lower_bound)
    return out
