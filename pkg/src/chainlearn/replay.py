"""Data-driven evolutions with a learned potential and their deviation metrics."""

from __future__ import annotations

import numpy as np

from .chain import ChainModel, grad_x_energy
from .ensemble import N_HIST_BINS, StrainSamples
from .flow import FlowParams, Trajectory, integrate
from .recon import PwLinearFn


def learned_model(model: ChainModel, fn: PwLinearFn) -> ChainModel:
    """Copy of ``model`` whose potential is the antiderivative of ``fn``.

    Outside the grid ``a_hat'`` is held constant, so ``a_hat''`` vanishes there.
    """
    return model.with_potential(fn.as_potential())


def replay(learned: ChainModel, params: FlowParams, x0, u0) -> Trajectory:
    """Integrate the flow driven by the learned potential."""
    return integrate(learned, params, x0, u0)


def learned_equilibrium_control(learned: ChainModel, x0):
    return grad_x_energy(learned, 0.0, x0)


def _common(a: Trajectory, b: Trajectory):
    if a.times.shape == b.times.shape and np.array_equal(a.times, b.times):
        return a.times, a.states, b.states
    lo = max(a.times[0], b.times[0])
    hi = min(a.times[-1], b.times[-1])
    if hi <= lo:
        raise ValueError("trajectories have disjoint time ranges")
    t = a.times[(a.times >= lo) & (a.times <= hi)]
    return t, a.at(t), b.at(t)


def trajectory_error(a: Trajectory, b: Trajectory):
    """``(max_t |a - b|_inf, int |a - b|_inf dt)`` on ``a``'s time grid.

    ``b`` is linearly interpolated when the grids differ.
    """
    t, xa, xb = _common(a, b)
    e = np.max(np.abs(xa - xb), axis=1)
    l1 = float(np.trapezoid(e, t)) if t.size > 1 else 0.0
    return float(np.max(e)), l1


def covered_intervals(samples: StrainSamples, bins: int = N_HIST_BINS):
    """Occupied histogram bins merged into disjoint intervals, cut to the sample range."""
    edges, counts = samples.histogram(bins)
    lo, hi = float(samples.values.min()), float(samples.values.max())
    occ = counts > 0
    out = []
    k = 0
    while k < bins:
        if occ[k]:
            j = k
            while j + 1 < bins and occ[j + 1]:
                j += 1
            out.append((max(edges[k], lo), min(edges[j + 1], hi)))
            k = j + 1
        else:
            k += 1
    return np.array(out)


def _distance(v, intervals):
    v = np.asarray(v, dtype=float)[..., None]
    lo, hi = intervals[:, 0], intervals[:, 1]
    d = np.maximum(lo - v, 0.0) + np.maximum(v - hi, 0.0)
    return np.min(d, axis=-1)


def support_distance(model: ChainModel, traj: Trajectory, samples: StrainSamples, bins: int = N_HIST_BINS) -> float:
    """L1-in-time of the largest strain distance to the occupied bins of the samples.

    A strain-space proxy for the distance of a trajectory to the explored
    region: zero iff every visited strain lies in an occupied bin.
    """
    if samples.values.size == 0:
        raise ValueError("no samples")
    iv = covered_intervals(samples, bins)
    z = model.strains(traj.times, traj.states)
    dist = np.max(_distance(z, iv), axis=1)
    return float(np.trapezoid(dist, traj.times))


def consistency_bound(delta: float, T: float, epsilon: float, M: float) -> float:
    """Loose Gronwall bound ``(delta T / eps) exp(M T / eps)`` on the replay error."""
    with np.errstate(over="ignore"):
        return float(delta * T / epsilon * np.exp(M * T / epsilon))
