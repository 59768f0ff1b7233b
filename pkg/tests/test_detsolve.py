from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agekin.detsolve import (
    ConvolutionKernel,
    GridFunction,
    LeslieModel,
    MasterState,
    leslie_project,
    master_evolve,
    solve_mvf,
    solve_volterra,
    steps_for,
    trapezoid_weights,
)
from agekin.errors import ConfigurationError, DomainError, IllConditionedStepError
from agekin.rates import AgeRate, CapacityModifier


def test_steps_for_requires_multiples():
    assert steps_for(2.0, 1e-3) == 2000
    with pytest.raises(ConfigurationError):
        steps_for(1.0, 0.3)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 50), h=st.floats(1e-3, 1.0))
def test_trapezoid_weights_integrate_linear_exactly(n, h):
    w = trapezoid_weights(n, h)
    x = h * np.arange(n)
    assert w @ (2.0 * x + 1.0) == pytest.approx((n - 1) * h * ((n - 1) * h + 1.0), rel=1e-12)


def test_volterra_with_unit_kernel_is_exponential():
    dt = 1e-3
    f = GridFunction(0.0, dt, np.ones(2001))
    b = solve_volterra(ConvolutionKernel(np.ones(2001)), f)
    assert b.values[-1] == pytest.approx(math.exp(2.0), rel=1e-6)
    # the callable form gives the same answer
    b2 = solve_volterra(lambda t, s: np.ones_like(s), f)
    np.testing.assert_allclose(b2.values, b.values, rtol=1e-12)


def test_volterra_rejects_singular_step():
    f = GridFunction(0.0, 0.5, np.ones(5))
    with pytest.raises(IllConditionedStepError):
        solve_volterra(ConvolutionKernel(np.full(5, 4.0)), f)


def _exp_density(lam, a_max=30.0, dt=1e-3, scale=1.0):
    return GridFunction.from_function(lambda a: scale * lam * np.exp(-lam * a), 0.0, a_max, dt)


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_constant_birth_total_grows_exponentially(lam):
    sol = solve_mvf(_exp_density(lam, a_max=40.0), AgeRate.constant(1.0), AgeRate.constant(0.0), 2.0)
    for t in (0.5, 1.0, 2.0):
        assert sol.total(sol.time_index(t)) == pytest.approx(math.exp(t), rel=1e-6)
    # newborn flux of a Yule process equals the current size
    assert sol.B.values[sol.time_index(1.0)] == pytest.approx(math.e, rel=1e-5)


def test_equal_birth_and_death_conserve_population():
    rate = AgeRate.linear(1.0, 0.3)
    sol = solve_mvf(_exp_density(1.0, a_max=40.0, dt=2e-3), rate, rate, 5.0)
    totals = sol.total_population().values
    np.testing.assert_allclose(totals, 1.0, atol=2e-6)


def test_density_is_continuous_across_the_seam_for_matched_boundary():
    # g(0) = int beta g makes the age-t seam continuous
    sol = solve_mvf(_exp_density(1.0), AgeRate.constant(1.0), AgeRate.constant(0.5), 1.0)
    j = sol.time_index(1.0)
    assert sol.born_branch(j)[-1] == pytest.approx(sol.initial_branch(j)[0], rel=1e-5)
    assert sol.rho.values.shape == (sol.n_times, sol.g.size)


def test_mvf_rejects_population_dependent_rates():
    cap = AgeRate.constant(1.0, CapacityModifier(5.0))
    with pytest.raises(ConfigurationError):
        solve_mvf(_exp_density(1.0), cap, AgeRate.constant(0.0), 1.0)


def test_yule_master_equation_is_geometric():
    traj = master_evolve(1.0, 0.0, MasterState.point(1), 1.5, output_times=[0.0, 1.5])
    p = traj.at(1.5).pmf
    q = math.exp(-1.5)
    n = np.arange(1, 12)
    np.testing.assert_allclose(p[n], q * (1 - q) ** (n - 1), rtol=1e-8, atol=1e-13)
    assert traj.at(1.5).mean == pytest.approx(math.exp(1.5), rel=1e-8)
    assert traj.leakage < 1e-9


def test_critical_birth_death_closed_form():
    # beta = mu = b: P0 = bt/(1+bt), Pn = (bt)^(n-1)/(1+bt)^(n+1)
    b, t = 0.5, 1.0
    p = master_evolve(b, b, MasterState.point(1), t).at(t).pmf
    x = b * t
    assert p[0] == pytest.approx(x / (1 + x), rel=1e-8)
    for n in range(1, 8):
        assert p[n] == pytest.approx(x ** (n - 1) / (1 + x) ** (n + 1), rel=1e-7)


def test_master_equation_with_capacity_saturates():
    beta = lambda n: 1.0 * np.maximum(0.0, 1.0 - n / 5.0)  # noqa: E731
    p = master_evolve(beta, 0.0, MasterState.point(1), 30.0).at(30.0).pmf
    assert int(np.argmax(p)) == 5 or int(np.argmax(p)) == 4
    assert p[6:].sum() < 1e-12


def test_master_state_validation():
    with pytest.raises(DomainError):
        MasterState(np.array([0.5, 0.4]))
    with pytest.raises(DomainError):
        master_evolve(1.0, 0.0, MasterState.point(1), 1.0, output_times=[2.0])


def test_leslie_projection_tracks_renewal_solution():
    beta, mu = AgeRate.constant(1.0), AgeRate.constant(0.2)
    width, bins = 0.01, 1500
    model = LeslieModel.from_rates(beta, mu, width, bins)
    a = width * np.arange(bins)
    n0 = np.exp(-a) * width
    traj = leslie_project(model, n0, 100)
    sol = solve_mvf(_exp_density(1.0, a_max=15.0, dt=width), beta, mu, 1.0)
    assert traj[-1].sum() == pytest.approx(sol.total(sol.time_index(1.0)), rel=2e-2)
    assert model.matrix.shape == (bins, bins)
    with pytest.raises(ConfigurationError):
        leslie_project(model, np.ones(3), 1)
