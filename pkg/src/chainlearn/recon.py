"""
Piecewise linear reconstruction of ``a'`` from measured strains.

The unknown is the vector of nodal values of ``a'`` on a grid. Each measured
configuration contributes the ``d`` rows of ``Dbar^T B`` where ``B`` holds the
hat functions evaluated at the ``d + 1`` strains, scaled by
``sqrt(Delta_m / N)``. The constrained problem

    min ||M c - Y||^2   s.t.  ||c||_inf <= M1,  ||D_grid c||_inf <= M2,  c(0) = 0

is solved by ADMM followed by an active-set polish.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .chain import ChainModel, TablePotential
from .ensemble import Grid, MeasurementSet, StrainSamples, weighted_quantile

log = logging.getLogger(__name__)

Y_MODES = ("exact", "observational")


class SolverError(RuntimeError):
    """ADMM hit ``max_iter``; carries the last residuals."""

    def __init__(self, message, primal=None, dual=None, iterations=None):
        super().__init__(message)
        self.primal = primal
        self.dual = dual
        self.iterations = iterations


# ---------------------------------------------------------------------------
# piecewise linear functions
# ---------------------------------------------------------------------------


def locate(grid: Grid, r):
    """Interval index ``l`` and local coordinate ``theta`` of clamped points.

    ``r`` is clamped to ``[p_0, p_{K-1}]``; then ``p_l <= r <= p_{l+1}`` and
    the two active hats are ``l`` (weight ``1 - theta``) and ``l + 1``.
    """
    p = grid.nodes
    r = np.clip(np.asarray(r, dtype=float), p[0], p[-1])
    l = np.clip(np.searchsorted(p, r, side="right") - 1, 0, p.size - 2)
    theta = (r - p[l]) / (p[l + 1] - p[l])
    return l, theta


def hat_eval(grid: Grid, k: int, r):
    """Hat function of node ``k`` (0-based) at ``r`` clamped to the grid range."""
    if not 0 <= k < grid.K:
        raise IndexError(f"node index {k} out of range for K={grid.K}")
    l, theta = locate(grid, r)
    return np.where(l == k, 1.0 - theta, 0.0) + np.where(l + 1 == k, theta, 0.0)


@dataclass
class PwLinearFn:
    """Continuous piecewise linear function by nodal values; constant outside."""

    grid: Grid
    coeffs: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.grid.K,):
            raise ValueError(f"need {self.grid.K} coefficients, got {self.coeffs.shape}")

    def __call__(self, r):
        return np.interp(r, self.grid.nodes, self.coeffs)

    def slopes(self):
        """Piecewise constant derivative, one value per grid interval."""
        return np.diff(self.coeffs) / self.grid.spacings

    def as_potential(self) -> TablePotential:
        """The potential ``a_hat`` with ``a_hat(0) = 0`` and this derivative."""
        return TablePotential(self.grid.nodes, self.coeffs, offset=0.0)


@dataclass
class PiecewiseQuadratic:
    """``a_hat(r) = c0[k] + c1[k] (r - p_k) + c2[k] (r - p_k)^2`` on ``[p_k, p_{k+1}]``.

    Outside the grid it continues linearly with the boundary slope.
    """

    nodes: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    c2: np.ndarray

    def __call__(self, r):
        p = self.nodes
        r = np.asarray(r, dtype=float)
        k = np.clip(np.searchsorted(p, r, side="right") - 1, 0, p.size - 2)
        dx = np.clip(r, p[0], p[-1]) - p[k]
        val = self.c0[k] + self.c1[k] * dx + self.c2[k] * dx * dx
        h_last = p[-1] - p[-2]
        slope_hi = self.c1[-1] + 2 * self.c2[-1] * h_last
        val = np.where(r < p[0], self.c0[0] + self.c1[0] * (r - p[0]), val)
        val = np.where(r > p[-1], val + slope_hi * (r - p[-1]), val)
        return val


def integrate_aprime(fn: PwLinearFn) -> PiecewiseQuadratic:
    """Exact antiderivative of ``fn`` normalised to vanish at 0."""
    p = fn.grid.nodes
    if not p[0] <= 0.0 <= p[-1]:
        raise ValueError("0 must lie inside the grid range")
    v = fn.coeffs
    h = np.diff(p)
    c1 = v[:-1]
    c2 = 0.5 * np.diff(v) / h
    cum = np.concatenate([[0.0], np.cumsum(c1 * h + c2 * h * h)])
    # shift so the value at 0 vanishes
    k0 = int(np.clip(np.searchsorted(p, 0.0, side="right") - 1, 0, p.size - 2))
    dx0 = -p[k0]
    at0 = cum[k0] + c1[k0] * dx0 + c2[k0] * dx0 * dx0
    return PiecewiseQuadratic(p.copy(), cum[:-1] - at0, c1.copy(), c2.copy())


def grid_gradient_operator(grid: Grid) -> sp.csr_matrix:
    """``(K-1) x K`` matrix with rows ``(1/h_k, -1/h_k)`` at columns ``(k, k+1)``."""
    if grid.K < 2:
        raise ValueError("need at least two nodes")
    inv = 1.0 / grid.spacings
    n = grid.K - 1
    rows = np.repeat(np.arange(n), 2)
    cols = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1).ravel()
    vals = np.stack([inv, -inv], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, grid.K))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


@dataclass
class SparseLsq:
    """Row-weighted sparse least-squares system ``||M c - Y||``."""

    M: sp.csr_matrix
    Y: np.ndarray
    grid: Grid
    clamped: int = 0
    y_mode: str = "exact"

    @property
    def shape(self):
        return self.M.shape

    def residual_norm(self, c) -> float:
        return float(np.linalg.norm(self.M @ np.asarray(c) - self.Y))

    def objective(self, c) -> float:
        r = self.M @ np.asarray(c) - self.Y
        return float(r @ r)


def assemble(model: ChainModel, ms: MeasurementSet, grid: Grid, y_mode: str = "exact") -> SparseLsq:
    """Build ``(M, Y)`` from measured strains.

    Rows are ordered by experiment, then measurement time, then node. In
    ``exact`` mode ``Y`` holds ``Dbar^T a'(strains)`` with the true ``a'``; in
    ``observational`` mode it holds the control ``u0``.
    """
    if grid.K < 2:
        raise ValueError("grid needs at least two nodes")
    if y_mode not in Y_MODES:
        raise ValueError(f"y_mode must be one of {Y_MODES}")
    Z = ms.strains  # (N, Ne, d+1)
    N, Ne, n1 = Z.shape
    d = n1 - 1
    p = grid.nodes
    clamped = int(np.count_nonzero((Z < p[0]) | (Z > p[-1])))
    if clamped:
        log.info("clamped %d of %d strains to the grid range", clamped, Z.size)
    scale = np.sqrt(ms.weights / N)  # (Ne,)
    l, theta = locate(grid, Z)
    s = np.broadcast_to(scale[None, :, None], (N, Ne, d))
    nrows = N * Ne * d
    rows = np.arange(nrows).reshape(N, Ne, d)
    lq, tq = l[..., :-1], theta[..., :-1]
    lr, tr = l[..., 1:], theta[..., 1:]
    R = np.stack([rows] * 4, axis=-1)
    C = np.stack([lq, lq + 1, lr, lr + 1], axis=-1)
    V = np.stack([s * (1 - tq), s * tq, -s * (1 - tr), -s * tr], axis=-1)
    M = sp.coo_matrix((V.ravel(), (R.ravel(), C.ravel())), shape=(nrows, grid.K)).tocsr()
    M.sum_duplicates()
    M.eliminate_zeros()
    if y_mode == "exact":
        da = model.potential.d1(Z)
        Y = s * (da[..., :-1] - da[..., 1:])
    else:
        Y = s * ms.controls[:, None, :]
    return SparseLsq(M=M, Y=np.ascontiguousarray(Y).ravel(), grid=grid, clamped=clamped, y_mode=y_mode)


def export_system(sys: SparseLsq, coo_path, y_path):
    """Write ``row,col,value`` triplets and the data vector (debug aid)."""
    coo = sys.M.tocoo()
    with open(coo_path, "w") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r},{c},{v:.17g}\n")
    with open(y_path, "w") as fh:
        fh.write("Y\n")
        for v in sys.Y:
            fh.write(f"{v:.17g}\n")


# ---------------------------------------------------------------------------
# constrained solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolveConfig:
    M1: float = 1000.0
    M2: float = 1000.0
    rho: float = 1.0
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    max_iter: int = 50_000
    pin_node: int | None = None
    adaptive_rho: bool = True
    polish: bool = True

    def __post_init__(self):
        if not (self.M1 > 0 and self.M2 > 0):
            raise ValueError("M1 and M2 must be positive")
        if not (self.tol_primal > 0 and self.tol_dual > 0 and self.rho > 0):
            raise ValueError("rho and tolerances must be positive")


class _Reduced:
    """Problem data with the pinned column removed.

    Variables ``y`` are the free coefficients; constraints are ``|C y| <= b``
    with ``C = [I; B E]``, ``B`` the unscaled difference operator and ``E``
    the embedding that puts 0 at the pin.
    """

    def __init__(self, sys: SparseLsq, cfg: SolveConfig, pin: int):
        K = sys.grid.K
        self.K, self.pin = K, pin
        self.free = np.delete(np.arange(K), pin)
        A = sys.M[:, self.free]
        self.Q = (A.T @ A).toarray()
        self.q = np.asarray(A.T @ sys.Y).ravel()
        self.yy = float(sys.Y @ sys.Y)
        n = K - 1
        B = sp.diags([np.ones(K - 1), -np.ones(K - 1)], [0, 1], shape=(K - 1, K)).tocsr()
        self.C = sp.vstack([sp.identity(n, format="csr"), B[:, self.free]]).tocsr()
        self.Cd = self.C.toarray()
        self.b = np.concatenate([np.full(n, cfg.M1), cfg.M2 * sys.grid.spacings])
        self.n = n

    def objective(self, y):
        return float(y @ self.Q @ y - 2 * self.q @ y + self.yy)

    def full(self, y):
        c = np.zeros(self.K)
        c[self.free] = y
        return c


def _admm(red: _Reduced, cfg: SolveConfig, history: list | None = None):
    n, m = red.n, red.C.shape[0]
    C, Cd, b = red.C, red.Cd, red.b
    CtC = Cd.T @ Cd
    rho = cfg.rho
    y = np.zeros(n)
    z = np.zeros(m)
    w = np.zeros(m)
    factor = sla.cho_factor(2 * red.Q + rho * CtC)
    rp = rd = np.inf
    for it in range(1, cfg.max_iter + 1):
        y = sla.cho_solve(factor, 2 * red.q + rho * (C.T @ (z - w)))
        Cy = C @ y
        z_old = z
        z = np.clip(Cy + w, -b, b)
        w = w + Cy - z
        rp = float(np.max(np.abs(Cy - z)))
        rd = float(rho * np.max(np.abs(C.T @ (z - z_old))))
        if history is not None:
            history.append((rp, rd, rho))
        if rp <= cfg.tol_primal and rd <= cfg.tol_dual:
            return y, z, rho * w, it, rp, rd
        if cfg.adaptive_rho and it % 50 == 0:
            # residual balancing; w is the scaled dual so it is rescaled too
            if rp > 10 * rd:
                rho, w = 2 * rho, w / 2
            elif rd > 10 * rp:
                rho, w = rho / 2, 2 * w
            else:
                continue
            factor = sla.cho_factor(2 * red.Q + rho * CtC)
    raise SolverError(
        f"ADMM did not converge in {cfg.max_iter} iterations (primal {rp:.3e}, dual {rd:.3e})",
        primal=rp,
        dual=rd,
        iterations=cfg.max_iter,
    )


def _polish(red: _Reduced, y, lam, tol):
    """Solve the equality QP on the active set suggested by ADMM.

    Returns ``(y, certified)`` or ``None`` if the candidate is infeasible.
    ``certified`` means all multipliers of the active set are nonnegative,
    i.e. the candidate satisfies the KKT conditions and is optimal.
    """
    Cy = red.Cd @ y
    act = (np.abs(Cy) >= red.b - 1e-7 * np.maximum(1.0, red.b)) | (np.abs(lam) > 1e-9)
    # the side of the bound comes from the iterate; split multipliers of
    # coinciding constraints carry no reliable sign
    sign = np.where(np.abs(Cy) > 0, np.sign(Cy), np.sign(lam))
    sign[sign == 0] = 1.0
    Ca = sign[act, None] * red.Cd[act]
    ba = red.b[act]
    na = Ca.shape[0]
    kkt = np.zeros((red.n + na, red.n + na))
    kkt[: red.n, : red.n] = 2 * red.Q
    kkt[: red.n, red.n :] = Ca.T
    kkt[red.n :, : red.n] = Ca
    rhs = np.concatenate([2 * red.q, ba])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    yp, mu = sol[: red.n], sol[red.n :]
    if np.max(np.abs(red.Cd @ yp) - red.b) > tol:
        return None
    if np.max(np.abs(kkt @ sol - rhs)) > 1e-8 * max(1.0, np.max(np.abs(rhs))):
        return None
    certified = bool(na == 0 or np.min(mu) >= -1e-9 * max(1.0, np.max(np.abs(mu))))
    return yp, certified


def solve_constrained_ls(sys: SparseLsq, cfg: SolveConfig, history: list | None = None) -> PwLinearFn:
    """Minimise ``||M c - Y||^2`` under the sup-norm bounds with the pin at 0.

    The returned function carries ``info`` with the iteration count, final
    residuals, objective and whether the polish step was accepted.
    """
    grid = sys.grid
    pin = cfg.pin_node
    if pin is None:
        if not grid.contains_zero:
            raise ValueError("0 is not a grid node; cannot pin a'(0) = 0")
        pin = grid.zero_index
    elif not 0 <= pin < grid.K:
        raise ValueError(f"pin node {pin} out of range")
    red = _Reduced(sys, cfg, pin)
    y, z, lam, iters, rp, rd = _admm(red, cfg, history)
    obj = red.objective(y)
    polished = False
    if cfg.polish:
        cand = _polish(red, y, lam, cfg.tol_primal)
        if cand is not None:
            yp, certified = cand
            objp = red.objective(yp)
            if certified or objp <= obj + 1e-12 * max(1.0, abs(obj)):
                y, obj, polished = yp, objp, True
    viol = float(max(0.0, np.max(np.abs(red.Cd @ y) - red.b)))
    info = {
        "iterations": iters,
        "primal_residual": rp,
        "dual_residual": rd,
        "objective": sys.objective(red.full(y)),
        "polished": polished,
        "max_violation": viol,
        "pin_node": pin,
    }
    return PwLinearFn(grid, red.full(y), info=info)


def solve_unconstrained(sys: SparseLsq, pin: int | None = None) -> PwLinearFn:
    """Pinned least-squares solution without bounds (minimum-norm if singular)."""
    grid = sys.grid
    pin = grid.zero_index if pin is None else pin
    free = np.delete(np.arange(grid.K), pin)
    A = sys.M[:, free].toarray()
    y = np.linalg.lstsq(A, sys.Y, rcond=None)[0]
    c = np.zeros(grid.K)
    c[free] = y
    return PwLinearFn(grid, c)


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def band_limits(samples: StrainSamples, band=(0.1, 0.9)):
    q_lo, q_hi = band
    if not 0.0 < q_lo < q_hi < 1.0:
        raise ValueError(f"quantile band {band} is empty or outside (0, 1)")
    lo, hi = weighted_quantile(samples.values, samples.weights, [q_lo, q_hi])
    if not hi > lo:
        raise ValueError("quantile band has zero width")
    return float(lo), float(hi)


def reconstruction_error(fn: PwLinearFn, model: ChainModel, samples: StrainSamples, band=(0.1, 0.9), n_eval: int = 2001):
    """Sup and weighted-RMS distance of ``fn`` to the true ``a'`` on a quantile band.

    Returns ``(sup_err, l2_err, scale)`` where ``scale`` is ``max |a'|`` on the
    band. The sup is taken over a fine grid plus the nodes inside the band;
    the L2 error is weighted by the pooled samples inside the band.
    """
    lo, hi = band_limits(samples, band)
    nodes = fn.grid.nodes
    r = np.union1d(np.linspace(lo, hi, n_eval), nodes[(nodes >= lo) & (nodes <= hi)])
    true = model.potential.d1(r)
    sup = float(np.max(np.abs(fn(r) - true)))
    scale = float(np.max(np.abs(true)))
    v, w = samples.values, samples.weights
    m = (v >= lo) & (v <= hi)
    diff = fn(v[m]) - model.potential.d1(v[m])
    l2 = float(np.sqrt(np.sum(w[m] * diff * diff) / np.sum(w[m])))
    return sup, l2, scale
