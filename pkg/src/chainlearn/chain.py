"""
Discrete elastic chain: potentials, boundary profiles and the energy

    E(t, x) = sum_j a((D e_t(x))_j),   e_t(x) = (f1(t), x_1, ..., x_d, f2(t)).

All array functions accept a single state of shape ``(d,)`` or a batch of
shape ``(n, d)``; the last axis is always the chain axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when a vector has the wrong length for the chain."""


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


class Potential:
    """Base class for an elastic potential ``a`` with derivatives.

    Subclasses implement ``value``, ``d1`` (a') and ``d2`` (a''), all
    vectorised over numpy arrays.
    """

    kind: str = "abstract"

    def value(self, s):
        raise NotImplementedError

    def d1(self, s):
        raise NotImplementedError

    def d2(self, s):
        raise NotImplementedError

    @property
    def params(self) -> tuple:
        return ()

    def coercivity(self):
        """Constants ``(C1, C2, p)`` with ``a(s) >= C1 |s|^p - C2``, or None."""
        return None

    def __call__(self, s):
        return self.value(s)

    def shifted(self, c: float) -> "Potential":
        """Return ``a + c``."""
        return ShiftedPotential(self, c)


@dataclass(frozen=True)
class Quadratic(Potential):
    """Linear elasticity, ``a(s) = k s^2 / 2``."""

    k: float = 1.0
    kind = "quadratic"

    def value(self, s):
        return 0.5 * self.k * np.square(s)

    def d1(self, s):
        return self.k * np.asarray(s, dtype=float)

    def d2(self, s):
        return np.full(np.shape(s), float(self.k))

    @property
    def params(self):
        return (self.k,)

    def coercivity(self):
        return (0.5 * self.k, 0.0, 2.0)


@dataclass(frozen=True)
class DoubleWell(Potential):
    """Nonconvex potential ``a(s) = kappa (s^2 - 1)^2 / 4 + beta s^2 / 2``.

    Wells sit near ``s = +-1`` when ``beta < kappa``; ``a'(0) = 0``.
    """

    kappa: float = 1.0
    beta: float = 0.0
    kind = "doublewell"

    def value(self, s):
        s = np.asarray(s, dtype=float)
        return 0.25 * self.kappa * (s * s - 1.0) ** 2 + 0.5 * self.beta * s * s

    def d1(self, s):
        s = np.asarray(s, dtype=float)
        return self.kappa * s * (s * s - 1.0) + self.beta * s

    def d2(self, s):
        s = np.asarray(s, dtype=float)
        return self.kappa * (3.0 * s * s - 1.0) + self.beta

    @property
    def params(self):
        return (self.kappa, self.beta)

    def coercivity(self):
        # (s^2 - 1)^2 >= s^4 / 2 - 1
        return (self.kappa / 8.0, self.kappa / 4.0, 4.0)


class TablePotential(Potential):
    """Potential given by nodal values of ``a'`` on increasing nodes.

    ``a'`` is the continuous piecewise linear interpolant, extended by the
    boundary values outside ``[nodes[0], nodes[-1]]``; ``a`` is its
    antiderivative with ``a(0) = offset``. ``a''`` is piecewise constant and
    takes the left-interval value at interior nodes.
    """

    kind = "table"

    def __init__(self, nodes, slopes, offset: float = 0.0):
        nodes = np.asarray(nodes, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        if nodes.ndim != 1 or nodes.shape != slopes.shape or nodes.size < 2:
            raise ValueError("table potential needs matching 1-d node/slope arrays, >= 2 nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("table nodes must be strictly increasing")
        self.nodes = nodes
        self.slopes = slopes
        self.offset = float(offset)
        h = np.diff(nodes)
        self._curv = np.diff(slopes) / h
        # antiderivative of a' from nodes[0] to each node
        cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (slopes[:-1] + slopes[1:]))])
        self._cum = cum - self._integral_from_first(0.0, cum) + self.offset

    def _integral_from_first(self, r, cum):
        """Integral of a' from nodes[0] to scalar r, given node cumulants."""
        return float(self._antiderivative(np.array([r]), cum)[0])

    def _antiderivative(self, s, cum):
        p, v = self.nodes, self.slopes
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        lo = s < p[0]
        hi = s > p[-1]
        mid = ~(lo | hi)
        out[lo] = cum[0] + v[0] * (s[lo] - p[0])
        out[hi] = cum[-1] + v[-1] * (s[hi] - p[-1])
        sm = s[mid]
        k = np.clip(np.searchsorted(p, sm, side="right") - 1, 0, p.size - 2)
        dx = sm - p[k]
        out[mid] = cum[k] + v[k] * dx + 0.5 * self._curv[k] * dx * dx
        return out

    def value(self, s):
        s = np.asarray(s, dtype=float)
        return self._antiderivative(s.ravel(), self._cum).reshape(s.shape)

    def d1(self, s):
        return np.interp(s, self.nodes, self.slopes)

    def d2(self, s):
        s = np.asarray(s, dtype=float)
        p = self.nodes
        k = np.searchsorted(p, s, side="left") - 1
        out = np.zeros(s.shape)
        inside = (s > p[0]) & (s <= p[-1])
        out[inside] = self._curv[k[inside]]
        # at the first node there is no left interval; use the first segment
        out[s == p[0]] = self._curv[0]
        return out

    @property
    def params(self):
        return (self.offset,)

    def __repr__(self):
        return f"TablePotential(K={self.nodes.size}, range=[{self.nodes[0]:g}, {self.nodes[-1]:g}])"


class ShiftedPotential(Potential):
    def __init__(self, base: Potential, c: float):
        self.base = base
        self.c = float(c)
        self.kind = base.kind

    def value(self, s):
        return self.base.value(s) + self.c

    def d1(self, s):
        return self.base.d1(s)

    def d2(self, s):
        return self.base.d2(s)

    @property
    def params(self):
        return self.base.params


def make_potential(kind: str, params=()) -> Potential:
    """Build a catalogue potential from its name and parameter list."""
    params = tuple(float(p) for p in params)
    if kind == "quadratic":
        return Quadratic(*params[:1])
    if kind == "doublewell":
        return DoubleWell(*params[:2])
    raise ValueError(f"unknown potential kind {kind!r} (use quadratic, doublewell or a table)")


def check_conditions(potential: Potential, R: float, M2: float, coercivity=None, n: int = 2001):
    """Sample-based checks of the standing assumptions on ``a`` over ``[-R, R]``.

    Returns a dict of booleans: ``nonnegative``, ``lipschitz`` (max |a''| <= M2),
    ``coercive`` (a(+-R) >= C1 R^p - C2) and ``pinned`` (a'(0) = 0).
    """
    s = np.linspace(-R, R, n)
    coercivity = coercivity if coercivity is not None else potential.coercivity()
    if coercivity is None:
        coercive = False
    else:
        c1, c2, p = coercivity
        ends = potential.value(np.array([-R, R]))
        coercive = bool(np.all(ends >= c1 * R**p - c2 - 1e-12))
    return {
        "nonnegative": bool(np.all(potential.value(s) >= 0.0)),
        "lipschitz": bool(np.max(np.abs(potential.d2(s))) <= M2),
        "coercive": coercive,
        "pinned": abs(float(potential.d1(0.0))) <= 1e-14,
    }


# ---------------------------------------------------------------------------
# boundary profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    """Boundary displacement ``f(t)``.

    kinds: ``constant`` (c), ``ramp`` (l0 + A t), ``sin`` (c + A sin(w t + phi)).
    """

    kind: str = "constant"
    params: tuple = (0.0,)

    _NPARAMS = {"constant": 1, "ramp": 2, "sin": 4}

    def __post_init__(self):
        if self.kind not in self._NPARAMS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        want = self._NPARAMS[self.kind]
        if len(self.params) != want:
            raise ValueError(f"profile {self.kind!r} takes {want} parameters, got {len(self.params)}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def value(self, t):
        p = self.params
        if self.kind == "constant":
            return p[0] + 0.0 * np.asarray(t, dtype=float)
        if self.kind == "ramp":
            return p[0] + p[1] * np.asarray(t, dtype=float)
        return p[0] + p[1] * np.sin(p[2] * np.asarray(t, dtype=float) + p[3])

    def rate(self, t):
        p = self.params
        if self.kind == "constant":
            return 0.0 * np.asarray(t, dtype=float)
        if self.kind == "ramp":
            return p[1] + 0.0 * np.asarray(t, dtype=float)
        return p[1] * p[2] * np.cos(p[2] * np.asarray(t, dtype=float) + p[3])

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or (self.kind in ("ramp", "sin") and self.params[1] == 0.0)

    def __str__(self):
        return f"{self.kind}:" + ",".join(repr(p) for p in self.params)

    @classmethod
    def parse(cls, text: str) -> "Profile":
        """Parse ``kind:p1,p2,...`` (as produced by ``str``)."""
        kind, _, rest = text.strip().partition(":")
        params = tuple(float(v) for v in rest.split(",")) if rest.strip() else ()
        return cls(kind.strip(), params)


# ---------------------------------------------------------------------------
# the chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainModel:
    """Chain of ``d`` free nodes between the boundary profiles ``f1`` and ``f2``."""

    d: int
    potential: Potential = field(default_factory=Quadratic)
    f1: Profile = field(default_factory=lambda: Profile("constant", (0.0,)))
    f2: Profile = field(default_factory=lambda: Profile("ramp", (1.0, 1.0)))
    T: float = 1.0
    M1: float = 1000.0
    M2: float = 1000.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")

    def with_potential(self, potential: Potential) -> "ChainModel":
        return ChainModel(self.d, potential, self.f1, self.f2, self.T, self.M1, self.M2)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise DimensionError(f"state has length {x.shape[-1]}, chain has d={self.d}")
        return x

    def embed(self, t, x):
        """``e_t(x)``: prepend ``f1(t)`` and append ``f2(t)``."""
        x = self._check(x)
        lead = np.broadcast_to(self.f1.value(t), x.shape[:-1])[..., None]
        tail = np.broadcast_to(self.f2.value(t), x.shape[:-1])[..., None]
        return np.concatenate([lead, x, tail], axis=-1)

    def strains(self, t, x):
        """``D e_t(x)``, length ``d + 1``."""
        return np.diff(self.embed(t, x), axis=-1)

    def uniform_state(self, t: float = 0.0):
        """Interior nodes on the straight line between the boundary values."""
        a, b = float(self.f1.value(t)), float(self.f2.value(t))
        return a + (b - a) * np.arange(1, self.d + 1) / (self.d + 1)


def discrete_gradient(y):
    """Consecutive differences ``(y_{j+1} - y_j)``; length ``d+2 -> d+1``."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] < 2:
        raise DimensionError("discrete_gradient needs at least two entries")
    return np.diff(y, axis=-1)


def dbar_transpose(w):
    """Apply the transposed minor of D: ``(w_i - w_{i+1})``, length ``d+1 -> d``.

    Its kernel is spanned by the constant vector.
    """
    w = np.asarray(w, dtype=float)
    if w.shape[-1] < 2:
        raise DimensionError("dbar_transpose needs at least two entries")
    return w[..., :-1] - w[..., 1:]


def energy(model: ChainModel, t, x):
    return np.sum(model.potential.value(model.strains(t, x)), axis=-1)


def grad_x_energy(model: ChainModel, t, x):
    return dbar_transpose(model.potential.d1(model.strains(t, x)))


def dt_energy(model: ChainModel, t, x):
    """Partial time derivative of ``E`` (boundary loading power)."""
    z = model.strains(t, x)
    da = model.potential.d1(z)
    return da[..., -1] * model.f2.rate(t) - da[..., 0] * model.f1.rate(t)


def hessian_bands(model: ChainModel, t, x):
    """Tridiagonal Hessian of ``E`` in ``x`` as ``(diag, offdiag)``.

    ``diag`` has shape ``(..., d)``, ``offdiag`` ``(..., d-1)`` (symmetric).
    """
    c = model.potential.d2(model.strains(t, x))
    return c[..., :-1] + c[..., 1:], -c[..., 1:-1]


def corrected_energy(model: ChainModel, t, x, u):
    """``E(t, x) - u . x``."""
    x = np.asarray(x, dtype=float)
    return energy(model, t, x) - np.sum(np.asarray(u) * x, axis=-1)


def grad_corrected_energy(model: ChainModel, t, x, u):
    return grad_x_energy(model, t, x) - np.asarray(u)


def state_radius_bound(model: ChainModel, energy_bound: float, u, t: float = 0.0):
    """Largest ``max_i |x_i|`` compatible with ``corrected_energy <= energy_bound``.

    Uses the coercivity constants of the potential and
    ``|x_i| <= |f1| + sum_j |z_j|``; returns ``inf`` if the potential is not
    coercive.
    """
    co = model.potential.coercivity()
    if co is None or co[0] <= 0:
        return math.inf
    c1, c2, p = co
    n = model.d + 1
    f1 = abs(float(model.f1.value(t)))
    unorm = float(np.linalg.norm(u)) * math.sqrt(model.d)

    def reach(S):
        # max |x_i| given sum |z_j|^p = S
        return f1 + n ** (1.0 - 1.0 / p) * S ** (1.0 / p)

    def lower(S):
        return c1 * S - n * c2 - unorm * reach(S)

    lo, hi = 0.0, 1.0
    while lower(hi) <= energy_bound:
        hi *= 2.0
        if hi > 1e300:
            return math.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if lower(mid) <= energy_bound:
            lo = mid
        else:
            hi = mid
    return reach(hi)
