from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from agekin import celldiv
from agekin.errors import DomainError, NumericalWarning
from agekin.rates import GammaBranching

# Independent Talbot inversion in 120-digit mpmath arithmetic with 200 nodes.
FROZEN = [
    (1.5, 1.0, 1.908523988350703, 2.176578579959421),
    (1.5, 2.5, 7.182790123987724, 8.152248412385146),
    (3.0, 1.0, 1.379692115363645, 1.760439705436386),
    (3.0, 2.5, 4.425170615270099, 5.675024253527574),
    (10.0, 1.0, 1.325764148810167, 1.548979973466215),
    (10.0, 2.5, 3.193326870390612, 4.488704389413704),
    (100.0, 1.0, 3.986099680914714, 1.513298798279149),
    (100.0, 2.5, 0.1218542256862974, 4.003685149005032),
]


@pytest.mark.parametrize("alpha, t, b, T", FROZEN)
def test_closed_forms_match_frozen_inversion(alpha, t, b, T):
    assert celldiv.B_closed_form(alpha, t) == pytest.approx(b, rel=1e-8)
    assert celldiv.T_closed_form(alpha, t) == pytest.approx(T, rel=1e-8)


@pytest.mark.parametrize("alpha, t, b, T", FROZEN[:6])
def test_talbot_oracle_matches_frozen_values(alpha, t, b, T):
    shift = celldiv.inversion_abscissa(alpha)
    nb = celldiv.numerical_laplace_inverse(celldiv.B_transform(alpha), t, shift=shift)
    nt = celldiv.numerical_laplace_inverse(celldiv.T_transform(alpha), t, shift=shift)
    assert nb.value == pytest.approx(b, rel=1e-8)
    assert nt.value == pytest.approx(T, rel=1e-8)
    assert not nb.flagged and not nt.flagged


@pytest.mark.parametrize("t", [0.25, 1.0, 3.0])
def test_exponential_cycle_gives_markov_growth(t):
    assert celldiv.B_closed_form(1.0, t) == pytest.approx(math.exp(t), rel=1e-10)
    assert celldiv.T_closed_form(1.0, t) == pytest.approx(math.exp(t), rel=1e-10)


def test_split_into_branch_and_residues():
    r = celldiv.bromwich_T(2.5, 1.7)
    assert r.total == r.branch + r.residues
    assert abs(r.residue_imag) < 1e-10 * abs(r.total)
    integer = celldiv.bromwich_B(4.0, 1.0)
    assert integer.branch == 0.0


@pytest.mark.parametrize("t", [0.7, 2.0])
@pytest.mark.parametrize("n", [2.0, 3.0, 4.0])
@pytest.mark.parametrize("eps", [1e-4, 1e-7])
def test_continuity_across_integer_shape(n, t, eps):
    # the branch cut vanishes at integer alpha; the non-integer forms must join it smoothly
    for fn in (celldiv.T_closed_form, celldiv.B_closed_form):
        mid = fn(n, t)
        for alpha in (n - eps, n + eps):
            assert fn(alpha, t) == pytest.approx(mid, rel=10 * eps)


@pytest.mark.parametrize("alpha", [2.00001, 1.99999])
def test_near_even_shape_matches_inversion(alpha):
    # a near-resonant cut denominator needs the peak handled in closed form
    shift = celldiv.inversion_abscissa(alpha)
    for t in (1.0, 2.0):
        ref = celldiv.numerical_laplace_inverse(celldiv.T_transform(alpha), t, shift=shift).value
        assert celldiv.T_closed_form(alpha, t) == pytest.approx(ref, rel=1e-8)


@pytest.mark.parametrize("alpha, expected", [(2.5, 3), (3.0, 3), (4.0, 4), (0.9, 1)])
def test_pole_sets(alpha, expected):
    labels, z = celldiv.pole_locations(alpha)
    assert len(z) == expected
    np.testing.assert_allclose(np.abs(z) ** alpha, 2.0, rtol=1e-12)
    assert np.all(np.abs(np.angle(z)) <= math.pi + 1e-12)


def test_growth_exponent_is_rightmost_pole():
    for alpha in (1.0, 2.5, 10.0):
        r = celldiv.growth_exponent(alpha)
        g = celldiv.gamma_transform(alpha)(r)
        assert float(g) == pytest.approx(0.5, rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(alpha=st.floats(1.0, 20.0), t0=st.floats(0.1, 4.0), dt=st.floats(0.05, 1.0))
def test_mean_population_is_nondecreasing(alpha, t0, dt):
    # certain fission never lowers the population
    assert celldiv.T_closed_form(alpha, t0 + dt) >= celldiv.T_closed_form(alpha, t0) * (1 - 1e-9)


@pytest.mark.parametrize("alpha", [1.0, 10.0, 100.0])
def test_mean_population_never_exceeds_markov_growth(alpha):
    t = np.round(np.arange(0.05, 5.0, 0.05), 10)
    T = np.asarray(celldiv.T_closed_form(alpha, t))
    assert np.all(T <= celldiv.reference_growth("markov", t) * (1 + 1e-12))


def test_reference_laws():
    assert celldiv.reference_growth("galton_watson", 2.9) == 4.0
    assert celldiv.reference_growth("markov", 1.0) == pytest.approx(math.e)
    with pytest.raises(DomainError):
        celldiv.reference_growth("markov", -1.0)
    with pytest.raises(DomainError):
        celldiv.reference_growth("poisson", 1.0)


def test_age_time_distribution_integrates_to_born_population():
    alpha, t = 3.0, 2.0
    x = np.linspace(1e-3, t, 800)
    dens = celldiv.age_time_distribution(alpha, x, t)
    born = integrate.trapezoid(dens, x)
    founder = float(GammaBranching(alpha).sf(t))
    assert born + founder == pytest.approx(celldiv.T_closed_form(alpha, t), rel=2e-3)
    with pytest.raises(DomainError):
        celldiv.age_time_distribution(alpha, 3.0, t)


def test_inversion_validation_and_flagging():
    with pytest.raises(DomainError):
        celldiv.numerical_laplace_inverse(celldiv.B_transform(2.0), 0.0)
    with pytest.raises(DomainError):
        celldiv.numerical_laplace_inverse(celldiv.B_transform(2.0), 1.0, nodes=4)
    # without a shift past the dominant pole the contour is invalid and the estimate disagrees
    with warnings.catch_warnings():
        warnings.simplefilter("error", NumericalWarning)
        with pytest.raises(NumericalWarning):
            celldiv.numerical_laplace_inverse(celldiv.T_transform(1.5), 3.0, nodes=16, shift=0.0, tol=1e-14)
