from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agekin import celldiv
from agekin.detsolve import GridFunction
from agekin.errors import ConfigurationError, DomainError
from agekin.fission_meanfield import (
    bellman_harris_mean,
    eval_XYT,
    solve_fission_B,
    total_population,
)
from agekin.rates import AgeRate, GammaBranching


@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0, 10.0])
@pytest.mark.parametrize("a2", [0.5, 0.8, 1.0])
def test_mean_field_total_equals_bellman_harris(alpha, a2):
    dist = GammaBranching.with_fission_probability(alpha, a2)
    bh = bellman_harris_mean(dist, 3.0, dt=1e-3).values
    tt = total_population(solve_fission_B(dist.fission_rate(), dist.death_rate(), 3.0, dt=1e-3)).values
    np.testing.assert_allclose(tt, bh, rtol=1e-8)


@pytest.mark.parametrize("alpha, t", [(2.0, 1.0), (3.0, 2.5), (10.0, 1.0)])
def test_certain_fission_matches_closed_form(alpha, t):
    dist = GammaBranching(alpha)
    fld = solve_fission_B(dist.fission_rate(), dist.death_rate(), 3.0, dt=5e-4)
    assert total_population(fld, t) == pytest.approx(celldiv.T_closed_form(alpha, t), rel=1e-5)
    assert float(fld.B(t)) == pytest.approx(celldiv.B_closed_form(alpha, t), rel=1e-4)


def test_sqrt_kernel_converges_at_order_three_halves():
    # alpha = 1.5 gives a t^(1/2) kernel, so the trapezoid error falls as h^1.5
    dist = GammaBranching(1.5)
    exact = celldiv.T_closed_form(1.5, 1.0)
    errs = [abs(total_population(solve_fission_B(dist.fission_rate(), dist.death_rate(), 1.0, dt=h), 1.0) / exact - 1)
            for h in (1e-3, 5e-4, 2.5e-4)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(orders, 1.5, atol=0.05)
    assert errs[-1] < 1e-5


@pytest.mark.parametrize("rate, t", [(1.0, 1.0), (0.4, 2.0)])
def test_exponential_fission_with_death(rate, t):
    # constant hazards: T' = (beta - mu) T
    fld = solve_fission_B(AgeRate.constant(rate), AgeRate.constant(0.3), 2.0)
    assert total_population(fld, t) == pytest.approx(math.exp((rate - 0.3) * t), rel=1e-6)


def test_cohort_fields_sum_consistently():
    dist = GammaBranching.with_fission_probability(3.0, 0.8)
    fld = solve_fission_B(dist.fission_rate(), dist.death_rate(), 2.0, dt=1e-3)
    x, t, X, Y, T = fld.grid_fields(stride=50)
    np.testing.assert_allclose(T, X + 2 * Y)
    assert np.all(X >= 0) and np.all(Y >= 0) and np.all(x <= t + 1e-12)
    Xe, Ye, Te = eval_XYT(fld, 0.5, 1.5)
    assert Te == pytest.approx(Xe + 2 * Ye)
    # newborn inflow balances the renewal equation everywhere
    assert np.max(np.abs(fld.boundary_residual())) < 1e-9 * np.max(fld.B.values)


def test_initial_density_founders():
    # an exponential-age singlet density under constant rates still grows at beta - mu
    dt = 1e-3
    s0 = GridFunction.from_function(lambda a: np.exp(-a), 0.0, 30.0, dt)
    fld = solve_fission_B(AgeRate.constant(1.0), AgeRate.constant(0.0), 1.0, dt=dt, singlets0=s0)
    assert total_population(fld, 1.0) == pytest.approx(math.e, rel=1e-5)
    X, Y, T = eval_XYT(fld, -0.5, 1.0)
    assert Y == 0.0 and T == pytest.approx(X)
    # doublets count twice
    fld2 = solve_fission_B(AgeRate.constant(1.0), AgeRate.constant(0.0), 1.0, dt=dt, doublets0=s0)
    assert total_population(fld2, 0.0) == pytest.approx(2.0, rel=1e-5)


@settings(max_examples=10, deadline=None)
@given(alpha=st.floats(1.0, 6.0), a2=st.floats(0.0, 1.0))
def test_totals_are_nonnegative_and_start_at_one(alpha, a2):
    dist = GammaBranching.with_fission_probability(alpha, a2)
    T = total_population(solve_fission_B(dist.fission_rate(), dist.death_rate(), 1.0, dt=1e-2)).values
    assert T[0] == pytest.approx(1.0)
    assert np.all(T >= -1e-12)


def test_tabulated_lifetime_law():
    dt = 1e-3
    dist = GammaBranching(2.0)
    g = GridFunction(0.0, dt, dist.pdf(dt * np.arange(2001)))
    tab = bellman_harris_mean(g, 2.0, dt=dt, a2=1.0).values
    ref = bellman_harris_mean(dist, 2.0, dt=dt).values
    np.testing.assert_allclose(tab, ref, rtol=1e-5)
    with pytest.raises(ConfigurationError):
        bellman_harris_mean(g, 2.0, dt=dt)


def test_fission_errors():
    beta = AgeRate.constant(1.0)
    with pytest.raises(ConfigurationError):
        bellman_harris_mean(GammaBranching(0.5), 1.0)
    fld = solve_fission_B(beta, AgeRate.constant(0.0), 1.0, dt=1e-2)
    with pytest.raises(DomainError):
        eval_XYT(fld, 0.8, 0.5)
    with pytest.raises(DomainError):
        total_population(fld, 2.0)
    bad = GridFunction(0.0, 0.5, np.ones(3))
    with pytest.raises(ConfigurationError):
        solve_fission_B(beta, AgeRate.constant(0.0), 1.0, dt=1e-2, singlets0=bad)
