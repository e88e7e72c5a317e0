"""Experiment ensembles, strain measurements and the adaptive grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from .chain import ChainModel, grad_x_energy
from .flow import FlowParams, IntegrationError, Trajectory, integrate_batch

log = logging.getLogger(__name__)

N_HIST_BINS = 100


class DegenerateSupportError(ValueError):
    """All strain samples coincide; no grid can be built."""


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian law of initial states with a uniform standard deviation."""

    mean: np.ndarray
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def sample_initial(model: ChainModel, law: InitialLaw, N: int):
    """Draw ``N`` initial states and their equilibrium controls.

    Returns arrays ``(x0, u0)`` of shape ``(N, d)`` with
    ``u0 = grad_x E(0, x0)``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    mean = np.broadcast_to(np.asarray(law.mean, dtype=float), (model.d,))
    rng = np.random.default_rng(law.seed)
    x0 = mean + law.sigma * rng.standard_normal((N, model.d))
    return x0, grad_x_energy(model, 0.0, x0)


def run_experiments(model: ChainModel, params: FlowParams, x0, u0, batch_size: int = 64) -> list[Trajectory]:
    """Integrate one trajectory per initial pair, preserving order."""
    x0 = np.atleast_2d(x0)
    u0 = np.atleast_2d(u0)
    if x0.shape[0] == 0:
        raise ValueError("no initial data")
    out = []
    for start in range(0, x0.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        try:
            out.extend(integrate_batch(model, params, x0[sl], u0[sl]))
        except IntegrationError as exc:
            member = start + (exc.member or 0)
            raise IntegrationError(
                f"experiment {member}: {exc}", time=exc.time, member=member, residual=exc.residual
            ) from exc
    return out


@dataclass
class MeasurementSet:
    """Measured states/strains at times ``t_m``; arrays indexed ``[i, m, ...]``."""

    times: np.ndarray
    weights: np.ndarray
    states: np.ndarray
    strains: np.ndarray
    controls: np.ndarray

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def n_times(self) -> int:
        return self.times.size


@dataclass
class StrainSamples:
    """Pooled strains with weights ``Delta_m / N`` (order: experiment, time, link)."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.values.shape != self.weights.shape:
            raise ValueError("values and weights must have equal shape")

    @property
    def R(self) -> float:
        """Half-width of the working window, 1.5 x the largest |strain|."""
        return 1.5 * float(np.max(np.abs(self.values)))

    def quantile(self, q):
        return weighted_quantile(self.values, self.weights, q)

    def histogram(self, bins: int = N_HIST_BINS, R: float | None = None):
        """Weighted histogram on ``[-R, R]``; returns ``(edges, weight per bin)``."""
        R = self.R if R is None else R
        edges = np.linspace(-R, R, bins + 1)
        counts, _ = np.histogram(self.values, bins=edges, weights=self.weights)
        return edges, counts


def measurement_times(T: float, n_times: int):
    """Uniform partition of ``[0, T]`` and its trapezoidal weights (sum = T)."""
    if n_times < 2:
        raise ValueError("need at least two measurement times")
    return _trapezoid_weights(np.linspace(0.0, T, n_times))


def snap_indices(grid, times):
    """Indices of the grid points nearest to ``times``."""
    idx = np.clip(np.searchsorted(grid, times), 1, grid.size - 1)
    left = grid[idx - 1]
    right = grid[idx]
    idx = np.where(np.abs(times - left) <= np.abs(right - times), idx - 1, idx)
    return idx


def extract_strains(model: ChainModel, trajectories, times):
    """Sample the trajectories at ``times`` (snapped to the step grid).

    Returns ``(MeasurementSet, StrainSamples)``. Weights follow the
    trapezoidal rule on the snapped times.
    """
    if not trajectories:
        raise ValueError("empty trajectory list")
    grid = trajectories[0].times
    idx = snap_indices(grid, np.asarray(times, dtype=float))
    t = grid[idx]
    if np.any(np.diff(t) <= 0):
        raise ValueError("measurement times collapse after snapping to the step grid")
    _, w = _trapezoid_weights(t)
    states = np.stack([tr.states[idx] for tr in trajectories])
    strains = model.strains(t[None, :], states)
    controls = np.stack([tr.control for tr in trajectories])
    N = len(trajectories)
    ms = MeasurementSet(times=t, weights=w, states=states, strains=strains, controls=controls)
    pooled_w = np.broadcast_to((w / N)[None, :, None], strains.shape)
    return ms, StrainSamples(strains.ravel().copy(), pooled_w.ravel().copy())


def _trapezoid_weights(t):
    w = np.empty(t.size)
    w[1:-1] = 0.5 * (t[2:] - t[:-2])
    w[0] = 0.5 * (t[1] - t[0])
    w[-1] = 0.5 * (t[-1] - t[-2])
    return t, w


def criticality_defect(model: ChainModel, ms: MeasurementSet) -> float:
    """``(1/N) sum_i sum_m Delta_m |grad_x E(t_m, x_i(t_m)) - u0_i|^2``."""
    g = grad_x_energy(model, ms.times[None, :], ms.states) - ms.controls[:, None, :]
    return float(np.sum(ms.weights[None, :] * np.sum(g * g, axis=-1)) / ms.N)


def weighted_quantile(values, weights, q):
    """Inverse of the weighted empirical CDF (left-continuous, q=0 -> min)."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    v = values[order]
    c = np.cumsum(np.asarray(weights, dtype=float)[order])
    c /= c[-1]
    q = np.atleast_1d(np.asarray(q, dtype=float))
    k = np.searchsorted(c, q * (1 - 1e-12), side="left")
    return v[np.clip(k, 0, v.size - 1)]


@dataclass(frozen=True)
class Grid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be a strictly increasing 1-d array with >= 2 entries")
        object.__setattr__(self, "nodes", nodes)

    @property
    def K(self) -> int:
        return self.nodes.size

    @property
    def spacings(self):
        return np.diff(self.nodes)

    @property
    def contains_zero(self) -> bool:
        return bool(np.any(self.nodes == 0.0))

    @property
    def zero_index(self) -> int:
        hit = np.flatnonzero(self.nodes == 0.0)
        if hit.size == 0:
            raise ValueError("0 is not a grid node")
        return int(hit[0])


def adaptive_grid(samples: StrainSamples, K: int, spacing_floor: float | None = None) -> Grid:
    """Nodes at weighted quantiles ``k/(K-1)`` of the pooled strains, plus 0.

    Starting from the node 0, candidates are kept outward in each direction
    when they are at least ``spacing_floor`` (default ``1e-3 * range``) from
    the previously kept node. The extreme sample always ends up covered: it
    replaces the outermost kept node when that keeps the spacing, otherwise
    one extra node is placed a floor further out.
    """
    if K < 3:
        raise ValueError("K must be >= 3")
    v = samples.values
    if v.size == 0:
        raise ValueError("no samples")
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise DegenerateSupportError(f"all {v.size} samples equal {lo:g}; cannot build a grid")
    floor = 1e-3 * (hi - lo) if spacing_floor is None else float(spacing_floor)
    if not floor > 0:
        raise ValueError("spacing_floor must be positive")
    raw = weighted_quantile(v, samples.weights, np.linspace(0.0, 1.0, K))
    raw[0], raw[-1] = lo, hi
    right = _outward(raw[raw > 0.0], hi, floor)
    left = _outward(-raw[raw < 0.0][::-1], -lo, floor)
    nodes = np.concatenate([-left[::-1], [0.0], right])
    return Grid(nodes)


def _outward(cands, extreme, floor):
    """Thin increasing positive candidates away from 0; keep ``extreme`` covered."""
    kept = [0.0]
    for p in cands:
        if p - kept[-1] >= floor:
            kept.append(float(p))
    if extreme > kept[-1]:
        if len(kept) > 1 and extreme - kept[-2] >= floor:
            kept[-1] = extreme
        else:
            kept.append(kept[-1] + floor)
    return np.array(kept[1:])


def w1_1d(a, b) -> float:
    """1-Wasserstein distance between two empirical laws on the line.

    Equal sizes use the sorted pairing ``mean |a_(k) - b_(k)|``; otherwise the
    exact CDF formula is used.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


def default_mean(model: ChainModel):
    return model.uniform_state(0.0)


def build_ensemble(model: ChainModel, params: FlowParams, law: InitialLaw, N: int, n_times: int):
    """Sample, integrate and measure in one go."""
    x0, u0 = sample_initial(model, law, N)
    trajs = run_experiments(model, params, x0, u0)
    t, _ = measurement_times(model.T, n_times)
    ms, samples = extract_strains(model, trajs, t)
    return trajs, ms, samples
