from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from agekin import celldiv
from agekin.errors import ConfigurationError, DomainError, MajorantViolationError, NumericalWarning
from agekin.mc import (
    AgeDistribution,
    EnsembleEstimator,
    FixedDtBlock,
    InitialCondition,
    PopulationState,
    ProcessRates,
    SimConfig,
    Snapshot,
    Thinner,
    count_stats,
    path_rng,
    simulate_paths,
    step_fixed,
    step_thinning,
    window_count_stats,
)
from agekin.rates import AgeRate, CapacityModifier, GammaBranching

YULE = ProcessRates(AgeRate.constant(1.0), AgeRate.constant(0.0))


# state and founders -------------------------------------------------------------


def test_population_state_validation():
    with pytest.raises(DomainError):
        PopulationState("budding", [0.5], clock=0.0)
    with pytest.raises(ConfigurationError):
        PopulationState("budding", [], [0.0])
    with pytest.raises(ConfigurationError):
        PopulationState("mitosis")
    s = PopulationState("fission", [-1.0], [-0.5], clock=0.0)
    c = s.copy()
    c.singles[0] = -3.0
    assert s.singles[0] == -1.0
    assert s.total() == 3
    np.testing.assert_allclose(np.sort(s.ages()), [0.5, 0.5, 1.0])


@pytest.mark.parametrize(
    "law, mean",
    [
        (AgeDistribution.exponential(2.0), 0.5),
        (AgeDistribution.gamma(4.0, 4.0), 1.0),
        (AgeDistribution.tabulated([0.0, 1.0, 2.0], [0.0, 1.0, 0.0]), 1.0),
        (AgeDistribution.point(0.7), 0.7),
    ],
)
def test_age_laws_sample_their_mean(law, mean):
    x = law.sample(np.random.default_rng(1), 40_000)
    assert np.all(x >= 0)
    assert x.mean() == pytest.approx(mean, abs=0.02)


@settings(max_examples=40, deadline=None)
@given(u=st.floats(0.0, 1.0))
def test_tabulated_ppf_inverts_the_cdf(u):
    law = AgeDistribution.tabulated([0.0, 0.5, 2.0, 3.0], [1.0, 2.0, 0.5, 0.0])
    a = float(law.ppf(u))
    grid = np.linspace(0.0, a, 4001)
    cdf = integrate.trapezoid(law.pdf(grid), grid)
    assert cdf == pytest.approx(u, abs=1e-6)


def test_age_law_errors():
    with pytest.raises(ConfigurationError):
        AgeDistribution.exponential(-1.0)
    with pytest.raises(ConfigurationError):
        AgeDistribution.tabulated([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(DomainError):
        AgeDistribution.point(1.0).pdf(1.0)
    assert AgeDistribution.exponential(1.0).upper_quantile(1e-9) == pytest.approx(-math.log(1e-9))


def test_founders_carry_negative_birth_times():
    init = InitialCondition(5, AgeDistribution.exponential(1.0), as_doublets=True)
    s = init.sample(np.random.default_rng(0), "fission")
    assert s.m == 0 and s.n_doublets == 5 and np.all(s.doublets <= 0)
    with pytest.raises(ConfigurationError):
        InitialCondition(-1)


# thinning -------------------------------------------------------------------------


def _fission_rates(alpha=3.0, a2=0.7):
    g = GammaBranching.with_fission_probability(alpha, a2)
    return ProcessRates(g.fission_rate(), g.death_rate())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a2=st.floats(0.3, 1.0))
def test_fission_events_preserve_bookkeeping(seed, a2):
    state = PopulationState("fission", [0.0])
    th = Thinner(state, _fission_rates(3.0, a2), 0.25, np.random.default_rng(seed))
    for _ in range(40):
        before = th.n
        fired = th.next_event(4.0)
        if not fired:
            break
        # fission turns one into two, death removes one
        assert th.n - before in (1, -1)
        assert th.n == int(np.count_nonzero(th.mult == 1)) + 2 * int(np.count_nonzero(th.mult == 2))
        assert np.all(th.tob <= th.clock)
    s = th.sync()
    assert s.total() == th.n
    snap = th.snapshot()
    assert snap.total == snap.singles + 2 * snap.doublets


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_budding_birth_adds_one_newborn(seed):
    rates = ProcessRates(AgeRate.linear(1.0, 0.5), AgeRate.constant(0.2))
    state = PopulationState("budding", [-0.3, -1.0])
    for _ in range(10):
        n0 = state.total()
        state = step_thinning(state, rates, 0.25, np.random.default_rng(seed), t_stop=5.0)
        if state.total() == n0 + 1:
            assert np.count_nonzero(state.ages() == 0.0) >= 1
        else:
            assert state.total() in (n0 - 1, n0)
        seed += 1
        if state.total() == 0 or state.clock >= 5.0:
            break


def test_majorant_violation_is_detected(monkeypatch):
    rates = ProcessRates(AgeRate.linear(1.0, 1.0), AgeRate.constant(0.0))
    orig = Thinner._base_sups

    def too_small(self, tob):
        b, d = orig(self, tob)
        return 0.5 * b, d

    monkeypatch.setattr(Thinner, "_base_sups", too_small)
    th = Thinner(PopulationState("budding", [0.0] * 20), rates, 0.5, np.random.default_rng(0))
    with pytest.raises(MajorantViolationError):
        th.run_until(5.0)


def test_extinct_path_stops_cleanly():
    rates = ProcessRates(AgeRate.constant(0.0), AgeRate.constant(1.0))
    th = Thinner(PopulationState("budding", []), rates, 0.25, np.random.default_rng(0))
    th.run_until(2.0)
    assert th.n == 0 and th.clock == 2.0


# fixed-dt ------------------------------------------------------------------------


def test_fixed_dt_step_advances_clock_and_ages():
    state = PopulationState("budding", [0.0, -1.0])
    state = step_fixed(state, YULE, 0.01, np.random.default_rng(3))
    assert state.clock == pytest.approx(0.01)
    assert state.total() in (2, 3, 4)
    assert np.all(state.ages() >= 0)


def test_fixed_dt_warns_for_coarse_steps():
    blk = FixedDtBlock("budding", ProcessRates(AgeRate.constant(5.0), AgeRate.constant(0.0)), 0.05,
                       np.random.default_rng(0), np.zeros(1, np.int64), np.zeros(1), np.ones(1, np.int64), 1)
    with pytest.warns(NumericalWarning):
        blk.step()


def test_fixed_dt_clock_does_not_drift():
    cfg = SimConfig(YULE, horizon=1.0, paths=4, stepper="fixed_dt", dt=0.1, output_times=(0.3, 0.7, 1.0))
    est = simulate_paths(cfg)
    assert est.paths == 4
    with pytest.raises(ConfigurationError):
        SimConfig(YULE, horizon=1.0, stepper="fixed_dt", dt=0.3)


# estimator -----------------------------------------------------------------------


def _snap(ages):
    a = np.asarray(ages, float)
    return Snapshot(a, a.size, 0)


def test_estimator_normalization_and_symmetry():
    est = EnsembleEstimator((1.0,), np.linspace(0.0, 2.0, 5))
    for ages in ([0.1, 0.6, 0.6], [], [1.9], [0.2, 3.0]):
        est.add_path([_snap(ages)])
    assert est.n_marginal(1.0) == {0: 0.25, 1: 0.25, 2: 0.25, 3: 0.25}
    w = est.bin_width
    mass = sum(est.age_density(1.0, n).sum() * w for n in (1, 2, 3)) + est.overflow_mass(1.0)
    assert mass == pytest.approx(0.75)
    pair = est.pair_density(1.0)
    np.testing.assert_allclose(pair, pair.T)
    # ordered pairs over paths with n >= 2, minus the pair lost to the overflow age
    assert pair.sum() * w * w == pytest.approx((1.0 + 0.0) / 4)
    np.testing.assert_array_equal(est.totals(1.0), [3, 0, 1, 2])


def test_estimator_merge_matches_single_pass():
    edges = np.linspace(0.0, 1.0, 11)
    paths = [[_snap(np.random.default_rng(i).random(i % 4))] for i in range(12)]
    whole = EnsembleEstimator((1.0,), edges, ((0.0, 0.5),))
    a = EnsembleEstimator((1.0,), edges, ((0.0, 0.5),))
    b = EnsembleEstimator((1.0,), edges, ((0.0, 0.5),))
    for i, p in enumerate(paths):
        whole.add_path(p)
        (a if i < 5 else b).add_path(p)
    a.merge(b)
    assert a.n_marginal(1.0) == whole.n_marginal(1.0)
    np.testing.assert_allclose(a.pair_density(1.0), whole.pair_density(1.0))
    np.testing.assert_array_equal(a.window_counts(1.0, (0.0, 0.5)), whole.window_counts(1.0, (0.0, 0.5)))
    with pytest.raises(DomainError):
        a.merge(EnsembleEstimator((2.0,), edges))


def test_estimator_edge_cases():
    est = EnsembleEstimator((1.0,), np.linspace(0.0, 1.0, 3), keep_charts=False)
    assert est.n_marginal(1.0) == {}
    assert est.overflow_mass(1.0) == 0.0
    with pytest.raises(DomainError):
        est.n_marginal(2.0)
    with pytest.raises(DomainError):
        est.window_counts(1.0, (0.0, 0.5))
    with pytest.raises(DomainError):
        est.add_path([])


def test_windows_are_half_open():
    est = EnsembleEstimator((1.0,), np.linspace(0.0, 2.0, 3))
    est.add_path([_snap([0.5, 1.0, 1.5])])
    assert est.window_counts(1.0, (0.5, 1.0))[0] == 1
    assert est.window_counts(1.0, (1.0, math.inf))[0] == 2


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=4, max_size=60))
def test_count_stats_match_numpy(x):
    s = count_stats(np.array(x))
    assert s.mean == pytest.approx(np.mean(x))
    assert s.var == pytest.approx(np.var(x, ddof=1), abs=1e-9)
    assert s.se_mean == pytest.approx(math.sqrt(np.var(x, ddof=1) / len(x)), abs=1e-9)
    assert s.se_var >= 0


def test_count_stats_small_samples():
    assert math.isnan(count_stats(np.array([])).mean)
    assert math.isnan(count_stats(np.array([3])).var)
    assert math.isnan(count_stats(np.array([1, 2, 3])).se_var)


# ensembles ------------------------------------------------------------------------


@pytest.mark.parametrize("stepper", ["thinning", "fixed_dt"])
def test_results_do_not_depend_on_worker_count(stepper):
    cfg = SimConfig(_fission_rates() if stepper == "thinning" else YULE, horizon=1.0, paths=60, seed=11,
                    mode="fission" if stepper == "thinning" else "budding", stepper=stepper, dt=0.01,
                    output_times=(0.5, 1.0), block_size=16)
    one = simulate_paths(cfg, workers=1)
    two = simulate_paths(cfg, workers=2)
    for t in cfg.output_times:
        np.testing.assert_array_equal(one.totals(t), two.totals(t))
        np.testing.assert_array_equal(one.pair_density(t), two.pair_density(t))
    again = simulate_paths(cfg, workers=1)
    np.testing.assert_array_equal(one.totals(1.0), again.totals(1.0))


def test_paths_use_independent_streams():
    a = path_rng(5, 0).random(4)
    b = path_rng(5, 1).random(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, path_rng(5, 0).random(4))


def test_zero_paths():
    est = simulate_paths(SimConfig(YULE, paths=0))
    assert est.paths == 0 and est.n_marginal(1.0) == {}


@pytest.mark.parametrize("stepper", ["thinning", "fixed_dt"])
def test_yule_mean_from_both_steppers(stepper):
    cfg = SimConfig(YULE, horizon=1.0, paths=4000, seed=2, stepper=stepper, dt=1e-3, windows=((0.0, 0.5),))
    est = simulate_paths(cfg)
    s = count_stats(est.totals(1.0))
    assert abs(s.mean - math.e) < 4 * s.se_mean + 5e-3 * (stepper == "fixed_dt")
    w = window_count_stats(est, (0.0, 0.5), 1.0)
    # newborns in the last half unit: e - e^{1/2}
    assert abs(w.mean - (math.e - math.exp(0.5))) < 4 * w.se_mean + 5e-3


def test_gamma_fission_tracks_closed_form():
    g = GammaBranching(3.0)
    cfg = SimConfig(ProcessRates(g.fission_rate(), g.death_rate()), horizon=2.0, paths=2000, seed=4,
                    mode="fission", keep_charts=False)
    s = count_stats(simulate_paths(cfg).totals(2.0))
    assert abs(s.mean - celldiv.T_closed_form(3.0, 2.0)) < 4 * s.se_mean


def test_capacity_caps_budding_population():
    birth = AgeRate.constant(1.0, CapacityModifier(4.0, 2.0))
    cfg = SimConfig(ProcessRates(birth, AgeRate.constant(0.0)), horizon=10.0, paths=50, seed=0)
    assert simulate_paths(cfg).totals(10.0).max() <= 4


def test_config_errors():
    with pytest.raises(ConfigurationError):
        SimConfig(YULE, paths=-1)
    with pytest.raises(ConfigurationError):
        SimConfig(YULE, horizon=1.0, output_times=(2.0,))
    with pytest.raises(ConfigurationError):
        SimConfig(YULE, windows=((1.0, 0.5),))
    g = GammaBranching(0.5)
    with pytest.raises(ConfigurationError):
        SimConfig(ProcessRates(g.fission_rate(), g.death_rate()), mode="fission")
