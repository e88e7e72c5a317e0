import numpy as np
import pytest

from chainlearn.chain import (
    ChainModel,
    DoubleWell,
    Profile,
    Quadratic,
    TablePotential,
    corrected_energy,
    grad_x_energy,
    state_radius_bound,
)
from chainlearn.flow import (
    FlowParams,
    IntegrationError,
    dissipation,
    energy_balance_defect,
    energy_balance_residual,
    energy_balance_terms,
    energy_upper_bound,
    integrate,
    integrate_batch,
)

CONSTANT = dict(f1=Profile("constant", (0.0,)), f2=Profile("constant", (1.5,)))


def equilibrium_start(model, seed=0, sigma=0.1):
    rng = np.random.default_rng(seed)
    x0 = model.uniform_state(0.0) + sigma * rng.standard_normal(model.d)
    return x0, grad_x_energy(model, 0.0, x0)


def linear_critical_state(model, t, u0):
    """Solve the quadratic criticality system directly (dense tridiagonal matrix)."""
    d = model.d
    A = 2 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1)
    rhs = np.array(u0, dtype=float)
    rhs[0] += model.f1.value(t)
    rhs[-1] += model.f2.value(t)
    return np.linalg.solve(A, rhs)


@pytest.mark.parametrize(
    "pot",
    [Quadratic(), DoubleWell(), DoubleWell(1.0, 0.5), TablePotential(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9) ** 3)],
    ids=["quadratic", "doublewell", "doublewell-beta", "table"],
)
def test_equilibrium_start_is_stationary(pot):
    model = ChainModel(d=6, potential=pot, **CONSTANT)
    x0, u0 = equilibrium_start(model)
    traj = integrate(model, FlowParams(epsilon=1e-2), x0, u0)
    assert np.max(np.abs(traj.states - x0)) <= 1e-10
    assert energy_balance_residual(model, traj) <= 1e-12
    assert dissipation(model, traj) <= 1e-20


def test_terminal_state_tracks_linear_critical_point():
    eps = 1e-3
    model = ChainModel(d=10)
    x0, u0 = equilibrium_start(model, seed=1)
    traj = integrate(model, FlowParams(epsilon=eps), x0, u0)
    target = linear_critical_state(model, 1.0, u0)
    assert np.max(np.abs(traj.states[-1] - target)) <= 10 * eps


def test_first_order_self_convergence():
    eps = 1e-2
    model = ChainModel(d=8, potential=DoubleWell(1.0, 0.5), f2=Profile("ramp", (-10.8, 21.6)))
    x0, u0 = equilibrium_start(model, seed=2)
    ends = [integrate(model, FlowParams(epsilon=eps, step=eps / k), x0, u0).states[-1] for k in (5, 10, 20, 40)]
    diffs = [np.max(np.abs(ends[i] - ends[i + 1])) for i in range(3)]
    ratios = [diffs[0] / diffs[1], diffs[1] / diffs[2]]
    for r in ratios:
        assert 1.5 <= r <= 2.6, ratios


def test_energy_balance_residual_small_and_decaying():
    eps = 1e-2
    model = ChainModel(d=10)
    x0, u0 = equilibrium_start(model, seed=3)
    r = []
    for k in (20, 40):
        h = eps / k
        traj = integrate(model, FlowParams(epsilon=eps, step=h), x0, u0)
        r.append(energy_balance_residual(model, traj))
        assert r[-1] <= 5 * h
    # at least first order; the quadratic case is in fact second order (see below)
    assert r[0] / r[1] >= 2 * 0.7


def test_energy_balance_defect_closed_form_for_quadratic_ramp():
    # For quadratic a and linear boundary data, implicit Euler with trapezoidal
    # quadrature leaves the per-interval defect (dt / 4 eps) |g_1 - g_0|^2,
    # g being the corrected gradient at the step points.
    eps = 1e-2
    model = ChainModel(d=7)
    x0, u0 = equilibrium_start(model, seed=13)
    traj = integrate(model, FlowParams(epsilon=eps, step=eps / 10), x0, u0)
    g = grad_x_energy(model, traj.times, traj.states) - u0
    expected = np.diff(traj.times) / (4 * eps) * np.sum(np.diff(g, axis=0) ** 2, axis=1)
    np.testing.assert_allclose(energy_balance_defect(model, traj), expected, rtol=1e-6, atol=1e-13)


def test_omitting_dissipation_adds_exactly_the_dissipation_terms():
    model = ChainModel(d=5, potential=DoubleWell())
    x0, u0 = equilibrium_start(model, seed=4)
    traj = integrate(model, FlowParams(epsilon=1e-2), x0, u0)
    terms = energy_balance_terms(model, traj)
    with_d = energy_balance_defect(model, traj, include_dissipation=True)
    without = energy_balance_defect(model, traj, include_dissipation=False)
    np.testing.assert_allclose(with_d - without, terms["kinetic"] + terms["gradient"], rtol=1e-12, atol=1e-15)


def test_dissipation_invariant_under_potential_shift():
    model = ChainModel(d=5, potential=DoubleWell())
    x0, u0 = equilibrium_start(model, seed=5)
    params = FlowParams(epsilon=1e-2)
    traj = integrate(model, params, x0, u0)
    shifted = model.with_potential(model.potential.shifted(3.0))
    traj2 = integrate(shifted, params, x0, u0)
    np.testing.assert_array_equal(traj.states, traj2.states)
    assert dissipation(shifted, traj2) == dissipation(model, traj)


def test_dissipation_bound_from_coarsest_run():
    model = ChainModel(d=10)
    x0, u0 = equilibrium_start(model, seed=6)
    vals = {}
    for eps in (1e-2, 5e-3, 2.5e-3):
        vals[eps] = dissipation(model, integrate(model, FlowParams(epsilon=eps), x0, u0))
    c_bar = vals[1e-2] / 1e-2
    for eps, v in vals.items():
        assert v <= c_bar * eps * (1 + 1e-12)


def test_states_stay_inside_a_priori_ball():
    model = ChainModel(d=8, potential=DoubleWell(1.0, 0.5), f2=Profile("ramp", (-10.8, 21.6)))
    x0, u0 = equilibrium_start(model, seed=7, sigma=0.3)
    traj = integrate(model, FlowParams(epsilon=1e-2), x0, u0)
    bound_e = float(np.max(energy_upper_bound(model, traj)))
    radius = max(state_radius_bound(model, bound_e, u0, t) for t in (0.0, 1.0))
    assert np.max(np.abs(traj.states)) <= radius


def test_corrected_energy_decreases_for_constant_boundaries():
    model = ChainModel(d=6, potential=DoubleWell(), **CONSTANT)
    rng = np.random.default_rng(8)
    x0 = model.uniform_state(0.0) + 0.5 * rng.standard_normal(6)
    u0 = 0.3 * rng.standard_normal(6)
    params = FlowParams(epsilon=1e-2)
    traj = integrate(model, params, x0, u0)
    e = corrected_energy(model, traj.times, traj.states, u0)
    assert np.all(np.diff(e) <= params.newton_tol)


def test_batch_matches_single_integration():
    model = ChainModel(d=4, potential=DoubleWell())
    rng = np.random.default_rng(9)
    X = model.uniform_state(0.0) + 0.2 * rng.standard_normal((3, 4))
    U = grad_x_energy(model, 0.0, X)
    params = FlowParams(epsilon=1e-2)
    batch = integrate_batch(model, params, X, U)
    for k in range(3):
        single = integrate(model, params, X[k], U[k])
        np.testing.assert_allclose(batch[k].states, single.states, atol=1e-12)


def test_semi_implicit_close_to_implicit():
    model = ChainModel(d=5)
    x0, u0 = equilibrium_start(model, seed=10)
    a = integrate(model, FlowParams(epsilon=1e-2), x0, u0)
    b = integrate(model, FlowParams(epsilon=1e-2, method="semi-implicit"), x0, u0)
    # the quadratic flow is linear, so one Newton step is exact
    np.testing.assert_allclose(a.states, b.states, atol=1e-10)


def test_newton_failure_reports_time():
    model = ChainModel(d=5, potential=DoubleWell(), f2=Profile("ramp", (-7.2, 14.4)))
    x0, u0 = equilibrium_start(model, seed=11)
    params = FlowParams(epsilon=1e-2, newton_tol=1e-15, newton_max_iter=1)
    with pytest.raises(IntegrationError) as info:
        integrate(model, params, x0, u0)
    assert info.value.time is not None and info.value.time > 0


def test_step_above_stability_margin_rejected():
    with pytest.raises(ValueError):
        FlowParams(epsilon=1e-3, step=1e-3)
    assert FlowParams(epsilon=1e-3).h == pytest.approx(2e-4)


def test_trajectory_interpolation():
    model = ChainModel(d=3)
    x0, u0 = equilibrium_start(model, seed=12)
    traj = integrate(model, FlowParams(epsilon=1e-2), x0, u0)
    np.testing.assert_allclose(traj.at(traj.times[7])[0], traj.states[7])
    mid = 0.5 * (traj.times[3] + traj.times[4])
    np.testing.assert_allclose(traj.at(mid)[0], 0.5 * (traj.states[3] + traj.states[4]))
