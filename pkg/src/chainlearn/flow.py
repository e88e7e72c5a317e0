"""
Singularly perturbed controlled gradient flow

    eps * x'(t) = -grad_x E(t, x(t)) + u0,     x(0) = x0,

integrated with implicit Euler and a damped Newton solve per step. The
Jacobian ``(eps/h) I + Hess E`` is tridiagonal per trajectory, so a batch of
trajectories is solved as one banded system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .chain import (
    ChainModel,
    corrected_energy,
    dt_energy,
    grad_x_energy,
    hessian_bands,
)

METHODS = ("implicit-euler", "semi-implicit")


class IntegrationError(RuntimeError):
    """Newton failed to converge; carries the failing time and batch member."""

    def __init__(self, message, time=None, member=None, residual=None):
        super().__init__(message)
        self.time = time
        self.member = member
        self.residual = residual


@dataclass(frozen=True)
class FlowParams:
    epsilon: float = 1e-3
    T: float = 1.0
    step: float | None = None
    method: str = "implicit-euler"
    newton_tol: float = 1e-10
    newton_max_iter: int = 50

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.step is not None and not 0 < self.step <= self.epsilon / 5 * (1 + 1e-12):
            raise ValueError(f"step must lie in (0, epsilon/5] = (0, {self.epsilon / 5:g}]")

    @property
    def h(self) -> float:
        return self.epsilon / 5 if self.step is None else self.step

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.T / self.h - 1e-9))

    def time_grid(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    control: np.ndarray
    epsilon: float
    max_residual: float = 0.0
    newton_iterations: int = 0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def at(self, t):
        """State at time ``t`` by linear interpolation."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.stack([np.interp(t, self.times, self.states[:, i]) for i in range(self.d)], axis=-1)
        return out


def _banded_solve(diag, off, rhs):
    """Solve a batch of symmetric tridiagonal systems as one banded system."""
    nb, d = diag.shape
    ab = np.zeros((3, nb * d))
    ab[1] = diag.ravel()
    if d > 1:
        up = np.zeros((nb, d))
        up[:, 1:] = off
        lo = np.zeros((nb, d))
        lo[:, :-1] = off
        ab[0] = up.ravel()
        ab[2] = lo.ravel()
    return solve_banded((1, 1), ab, rhs.ravel(), check_finite=False).reshape(nb, d)


def _residual(model, t, x, x_prev, u, lam):
    return grad_x_energy(model, t, x) - u + lam * (x - x_prev)


def integrate_batch(model: ChainModel, params: FlowParams, x0, u0) -> list[Trajectory]:
    """Integrate a batch of initial pairs on a common step grid.

    ``x0`` and ``u0`` have shape ``(n, d)``. Each implicit step is iterated
    until ``max |grad E - u0 + eps (x - x_prev)/h| <= newton_tol`` for every
    member.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    u0 = np.atleast_2d(np.asarray(u0, dtype=float))
    if x0.shape != u0.shape or x0.shape[1] != model.d:
        raise ValueError(f"x0/u0 must have shape (n, {model.d})")
    times = params.time_grid()
    n = times.size - 1
    nb, d = x0.shape
    states = np.empty((n + 1, nb, d))
    states[0] = x0
    max_res = np.zeros(nb)
    iters = np.zeros(nb, dtype=int)
    x = x0.copy()
    for step in range(n):
        t1 = times[step + 1]
        lam = params.epsilon / (t1 - times[step])
        x_prev = x
        if params.method == "semi-implicit":
            r = _residual(model, t1, x_prev, x_prev, u0, lam)
            dg, off = hessian_bands(model, t1, x_prev)
            x = x_prev - _banded_solve(dg + lam, off, r)
            iters += 1
        else:
            x = _newton_step(model, t1, x_prev, u0, lam, params, max_res, iters)
        states[step + 1] = x
    out = []
    for b in range(nb):
        out.append(
            Trajectory(
                times=times.copy(),
                states=np.ascontiguousarray(states[:, b, :]),
                control=u0[b].copy(),
                epsilon=params.epsilon,
                max_residual=float(max_res[b]),
                newton_iterations=int(iters[b]),
            )
        )
    return out


def _newton_step(model, t1, x_prev, u0, lam, params, max_res, iters):
    x = x_prev.copy()
    r = _residual(model, t1, x, x_prev, u0, lam)
    rn = np.max(np.abs(r), axis=1)
    active = rn > params.newton_tol
    it = 0
    while np.any(active):
        if it >= params.newton_max_iter:
            bad = int(np.flatnonzero(active)[0])
            raise IntegrationError(
                f"Newton did not converge at t={t1:.6g} (member {bad}, residual {rn[bad]:.3e})",
                time=float(t1),
                member=bad,
                residual=float(rn[bad]),
            )
        idx = np.flatnonzero(active)
        xa, ra = x[idx], r[idx]
        dg, off = hessian_bands(model, t1, xa)
        dx = -_banded_solve(dg + lam, off, ra)
        alpha = np.ones(idx.size)
        xprev_a, ua = x_prev[idx], u0[idx]
        rna = rn[idx]
        # per-member backtracking on the max-norm residual
        for _ in range(30):
            xt = xa + alpha[:, None] * dx
            rt = _residual(model, t1, xt, xprev_a, ua, lam)
            rnt = np.max(np.abs(rt), axis=1)
            ok = (rnt < rna) | (rnt <= params.newton_tol)
            if np.all(ok):
                break
            alpha = np.where(ok, alpha, 0.5 * alpha)
        x[idx] = xt
        r[idx] = rt
        rn[idx] = rnt
        iters[idx] += 1
        active = rn > params.newton_tol
        it += 1
    np.maximum(max_res, rn, out=max_res)
    return x


def integrate(model: ChainModel, params: FlowParams, x0, u0) -> Trajectory:
    """Integrate one trajectory; see ``integrate_batch``."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    return integrate_batch(model, params, x0[None, :], u0[None, :])[0]


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def _grad_bar(model, traj):
    return grad_x_energy(model, traj.times, traj.states) - traj.control


def energy_balance_terms(model: ChainModel, traj: Trajectory) -> dict:
    """Per-interval terms of the energy balance along a discrete trajectory.

    Returns arrays of length ``n_steps``: ``delta`` (change of corrected
    energy), ``work`` (trapezoidal integral of the time derivative),
    ``kinetic`` ((eps/2) int |x'|^2 with one-sided difference quotients) and
    ``gradient`` ((1/2eps) int |grad Ebar|^2, trapezoidal), plus ``dt``.
    """
    t, x, u, eps = traj.times, traj.states, traj.control, traj.epsilon
    dt = np.diff(t)
    ebar = corrected_energy(model, t, x, u)
    power = dt_energy(model, t, x)
    g2 = np.sum(_grad_bar(model, traj) ** 2, axis=1)
    v2 = np.sum(np.diff(x, axis=0) ** 2, axis=1) / dt**2
    return {
        "dt": dt,
        "delta": np.diff(ebar),
        "work": 0.5 * dt * (power[:-1] + power[1:]),
        "kinetic": 0.5 * eps * dt * v2,
        "gradient": 0.5 / eps * 0.5 * dt * (g2[:-1] + g2[1:]),
    }


def energy_balance_defect(model: ChainModel, traj: Trajectory, include_dissipation: bool = True):
    """Signed per-interval defect of the energy balance."""
    terms = energy_balance_terms(model, traj)
    res = terms["delta"] - terms["work"]
    if include_dissipation:
        res = res + terms["kinetic"] + terms["gradient"]
    return res


def energy_balance_residual(model: ChainModel, traj: Trajectory, include_dissipation: bool = True) -> float:
    """Max over step intervals of the balance defect per unit time."""
    res = energy_balance_defect(model, traj, include_dissipation)
    return float(np.max(np.abs(res) / np.diff(traj.times)))


def dissipation(model: ChainModel, traj: Trajectory) -> float:
    """Trapezoidal ``int_0^T |grad_x Ebar(t, x(t), u0)|^2 dt``."""
    g2 = np.sum(_grad_bar(model, traj) ** 2, axis=1)
    return float(np.trapezoid(g2, traj.times))


def energy_upper_bound(model: ChainModel, traj: Trajectory):
    """Running bound ``Ebar(0) + int_0^t dEbar/dtau`` implied by the balance."""
    terms = energy_balance_terms(model, traj)
    e0 = float(corrected_energy(model, 0.0, traj.states[0], traj.control))
    return e0 + np.concatenate([[0.0], np.cumsum(terms["work"])])
