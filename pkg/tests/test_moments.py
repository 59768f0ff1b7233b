from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agekin.detsolve import GridFunction
from agekin.errors import ConfigurationError, DomainError
from agekin.moments import (
    StirlingTable,
    solve_factorial_moment_k1,
    solve_factorial_moment_k2,
    stirling_convert,
    window_mean_var,
    yule_furry_closed,
)
from agekin.rates import AgeRate

LAM, BETA = 2.0, 1.0


def test_stirling_tables_known_rows():
    tab = StirlingTable(5)
    assert tab.S[4] == (0, 1, 7, 6, 1, 0)
    assert tab.s[4] == (0, -6, 11, -6, 1, 0)
    assert tab.self_test(15)
    with pytest.raises(ConfigurationError):
        StirlingTable(-1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=6))
def test_stirling_conversion_round_trips_exactly(moments):
    tab = StirlingTable(6)
    raw = stirling_convert(tab, moments, to="raw")
    assert stirling_convert(tab, raw, to="factorial") == moments


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=40))
def test_stirling_conversion_matches_sample_moments(sample):
    # factorial moments of an empirical law map onto its raw moments
    n = np.array(sample)
    fact = [int(sum(math.perm(int(x), k) for x in n)) for k in (1, 2, 3)]
    raw = stirling_convert(StirlingTable(3), fact, to="raw")
    assert raw == [int((n**k).sum()) for k in (1, 2, 3)]


def test_stirling_conversion_errors():
    with pytest.raises(ConfigurationError):
        stirling_convert(StirlingTable(1), [1, 2])
    with pytest.raises(ConfigurationError):
        stirling_convert(StirlingTable(2), [1, 2], to="binomial")


def _yule(h, a_max=20.0, horizon=1.5, method="auto"):
    g = GridFunction.from_function(lambda a: LAM * np.exp(-LAM * a), 0.0, a_max, h)
    beta, mu = AgeRate.constant(BETA), AgeRate.constant(0.0)
    x1 = solve_factorial_moment_k1(g, beta, mu, horizon)
    return x1, solve_factorial_moment_k2(x1, beta, mu, method=method)


@pytest.fixture(scope="module")
def yule_fine():
    return _yule(2e-3)


@pytest.mark.parametrize("a, t", [(0.2, 1.0), (1.4, 1.0), (0.5, 1.5), (0.0, 0.5)])
def test_first_moment_matches_closed_form(yule_fine, a, t):
    x1, _ = yule_fine
    x1_exact, *_ = yule_furry_closed(LAM, BETA, a, math.inf, t)
    assert x1.value(a, t) == pytest.approx(x1_exact, rel=1e-4)


@pytest.mark.parametrize("a, b, t", [(0.2, 0.6, 1.0), (0.4, 1.4, 1.0), (0.1, 3.0, 1.5)])
def test_pair_density_matches_closed_form(yule_fine, a, b, t):
    _, x2 = yule_fine
    _, exact, *_ = yule_furry_closed(LAM, BETA, a, b, t)
    assert x2.value(a, b, t) == pytest.approx(exact, rel=2e-3)
    assert x2.value(b, a, t) == x2.value(a, b, t)


@pytest.mark.parametrize("window", [(0.5, 1.5), (0.0, 1.0), (2.0, math.inf), (0.0, math.inf)])
@pytest.mark.parametrize("t", [0.5, 1.5])
def test_window_mean_and_variance(yule_fine, window, t):
    x1, x2 = yule_fine
    _, _, e, v = yule_furry_closed(LAM, BETA, window[0], window[1], t)
    m, var = window_mean_var(x1, x2, window, t)
    assert m == pytest.approx(e, rel=1e-4, abs=1e-10)
    assert var == pytest.approx(v, rel=1e-3, abs=1e-10)


def test_unordered_boundary_two_regimes(yule_fine):
    _, x2 = yule_fine
    t = 1.0
    for a in (0.3, 0.8):
        assert x2.unordered_boundary(a, t) == pytest.approx(BETA**2 * math.exp(-BETA * a + 2 * BETA * t), rel=1e-3)
    for a in (1.2, 2.0):
        exact = BETA * LAM / 2 * math.exp(-LAM * a + (LAM + BETA) * t)
        assert x2.unordered_boundary(a, t) == pytest.approx(exact, rel=1e-3)


def test_general_march_agrees_with_constant_recursion():
    _, const = _yule(0.02, a_max=10.0, horizon=1.0, method="constant")
    _, gen = _yule(0.02, a_max=10.0, horizon=1.0, method="general")
    np.testing.assert_allclose(gen.edge_born, const.edge_born, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(gen.edge_init, const.edge_init, rtol=1e-10, atol=1e-12)


def test_variance_of_pure_death_is_binomial():
    # no births: N ~ Binomial(1, U) with U = e^{-mu t} for one exponential-age founder
    h, mu_v = 0.01, 0.7
    g = GridFunction.from_function(lambda a: np.exp(-a), 0.0, 25.0, h)
    beta, mu = AgeRate.constant(0.0), AgeRate.constant(mu_v)
    x1 = solve_factorial_moment_k1(g, beta, mu, 1.0)
    x2 = solve_factorial_moment_k2(x1, beta, mu)
    m, var = window_mean_var(x1, x2, (0.0, math.inf), 1.0)
    p = math.exp(-mu_v)
    assert m == pytest.approx(p, rel=1e-4)
    assert var == pytest.approx(p * (1 - p), rel=1e-3)


@pytest.mark.parametrize("t", [0.0, 0.7, 1.5])
def test_grid_samplers_match_pointwise_values(t):
    x1, x2 = _yule(0.05, a_max=2.0)
    ages, v1 = x1.grid(t, stride=3)
    assert ages[-1] <= t + 2.0 + 1e-12
    np.testing.assert_array_equal(v1, [x1.value(a, t) for a in ages])
    ages2, v2 = x2.grid(t, stride=3)
    np.testing.assert_array_equal(ages2, ages)
    np.testing.assert_array_equal(v2, v2.T)
    for p, q in [(0, 0), (1, 4), (len(ages) - 1, 2), (len(ages) - 1, len(ages) - 1)]:
        assert v2[p, q] == x2.value(ages[p], ages[q], t)


def test_moment_errors():
    x1, _ = _yule(0.05, a_max=5.0, horizon=1.0)
    beta = AgeRate.linear(1.0, 0.0)
    with pytest.raises(ConfigurationError):
        solve_factorial_moment_k2(x1, beta, AgeRate.constant(0.0))
    with pytest.raises(ConfigurationError):
        solve_factorial_moment_k2(x1, x1.sol.beta, x1.sol.mu, horizon=2.0)
    with pytest.raises(ConfigurationError):
        solve_factorial_moment_k2(x1, x1.sol.beta, x1.sol.mu, method="spectral")
    with pytest.raises(DomainError):
        window_mean_var(x1, None, (1.0, 0.5), 0.5)
    with pytest.raises(DomainError):
        yule_furry_closed(LAM, BETA, 1.0, 1.0, 0.5)
    with pytest.raises(ConfigurationError):
        x1.window_integral(0.0, 0.123, 0.5)
