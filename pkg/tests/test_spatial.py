from __future__ import annotations

import math

import numpy as np
import pytest

from agekin.errors import ConfigurationError, DomainError
from agekin.mc import InitialCondition, ProcessRates, SimConfig, simulate_paths
from agekin.rates import AgeRate
from agekin.spatial import (
    PositionProfile,
    SpatialConfig,
    SpatialPopulationState,
    compare_heat_kernel,
    heat_kernel_check,
    simulate_spatial,
)


def _base(birth=0.0, death=0.0, paths=400, horizon=1.0, seed=0, **kw):
    rates = ProcessRates(AgeRate.constant(birth), AgeRate.constant(death))
    return SimConfig(rates, InitialCondition(1), horizon=horizon, paths=paths, seed=seed,
                     stepper="fixed_dt", dt=0.01, keep_charts=False, **kw)


def test_profiles():
    assert PositionProfile.uniform()(np.array([3.0, -1.0])).tolist() == [1.0, 1.0]
    g = PositionProfile.gaussian(1.0, 0.5, 2.0, 0.1)
    assert g(1.0) == pytest.approx(2.1)
    tab = PositionProfile.tabulated([0.0, 1.0], [0.0, 2.0])
    assert tab(np.array([-1.0, 0.5, 5.0])).tolist() == [0.0, 1.0, 2.0]
    with pytest.raises(ConfigurationError):
        PositionProfile.gaussian(0.0, 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        PositionProfile.tabulated([0.0, 1.0], [1.0, -1.0])


def test_spatial_state_keeps_positions_aligned():
    s = SpatialPopulationState([-1.0, -0.2, 0.0], [5.0, 6.0, 7.0], clock=0.0)
    p = s.permute([2, 0, 1])
    np.testing.assert_array_equal(p.tob, [0.0, -1.0, -0.2])
    np.testing.assert_array_equal(p.positions, [7.0, 5.0, 6.0])
    with pytest.raises(DomainError):
        SpatialPopulationState([0.0], [1.0, 2.0])


def test_spatial_config_validation():
    with pytest.raises(ConfigurationError):
        SpatialConfig(SimConfig(ProcessRates(AgeRate.constant(1.0), AgeRate.constant(0.0))))
    with pytest.raises(ConfigurationError):
        SpatialConfig(_base(), diffusion=-1.0)
    with pytest.raises(ConfigurationError):
        SpatialConfig(_base(), dimension=2)
    cfg = SpatialConfig(_base(), diffusion=0.5, q0=1.0)
    lo, hi = cfg.q_range
    assert lo < 1.0 < hi and cfg.q_edges.size > 2


def test_heat_kernel_density():
    mu = AgeRate.constant(0.5)
    q = np.linspace(-10, 10, 4001)
    dens = heat_kernel_check(mu, 1.0, 0.5, q)
    assert float(np.sum(dens) * (q[1] - q[0])) == pytest.approx(math.exp(-0.5), rel=1e-6)
    with pytest.raises(DomainError):
        heat_kernel_check(mu, 1.0, 0.0, q)


@pytest.mark.parametrize("death", [0.0, 0.7])
def test_lone_diffuser_matches_heat_kernel(death):
    cfg = SpatialConfig(_base(death=death, paths=3000, seed=3), diffusion=0.5)
    res = simulate_spatial(cfg)
    mu = AgeRate.constant(death)
    cmp = compare_heat_kernel(res, mu, 1.0, 0.5)
    assert cmp.ks_pvalue > 1e-3
    assert abs(cmp.survival_mc - cmp.survival_exact) < 4 * cmp.survival_se + 1e-12
    assert res.total_probability(1.0) == pytest.approx(1.0, abs=1e-12)


def test_uniform_profiles_reduce_to_plain_simulation():
    base = _base(birth=1.0, death=0.3, paths=300, seed=9, output_times=(0.5, 1.0))
    spatial = simulate_spatial(SpatialConfig(base, diffusion=0.2))
    plain = simulate_paths(base)
    a, b = spatial.ensemble.totals(1.0), plain.totals(1.0)
    se = math.sqrt(a.var() / a.size + b.var() / b.size)
    assert abs(a.mean() - b.mean()) < 4 * se


def test_position_dependent_birth_is_local():
    # births only near q = 0; a narrow birth zone yields fewer births than uniform birth
    base = _base(birth=2.0, paths=400, seed=1)
    local = simulate_spatial(SpatialConfig(base, diffusion=1.0,
                                           birth_profile=PositionProfile.gaussian(0.0, 0.2, 1.0)))
    uniform = simulate_spatial(SpatialConfig(base, diffusion=1.0))
    assert local.ensemble.totals(1.0).mean() < uniform.ensemble.totals(1.0).mean()


def test_spatial_runs_are_worker_independent():
    cfg = SpatialConfig(_base(birth=1.0, paths=40, seed=5, block_size=8), diffusion=0.3, q0_spread=0.1)
    one = simulate_spatial(cfg, workers=1)
    two = simulate_spatial(cfg, workers=2)
    np.testing.assert_array_equal(one.aq_density(1.0), two.aq_density(1.0))
    np.testing.assert_array_equal(one.all_positions(1.0), two.all_positions(1.0))


def test_newborns_sit_at_the_parent_position():
    # without motion every descendant stays exactly at the founder's position
    cfg = SpatialConfig(_base(birth=2.0, paths=50, seed=2), diffusion=0.0, q0=1.25)
    res = simulate_spatial(cfg)
    pos = res.all_positions(1.0)
    assert pos.size > 50
    assert np.all(pos == 1.25)


@pytest.mark.parametrize("dt", [0.02, 0.01])
def test_fixed_dt_bias_matches_discrete_growth_and_halves(dt):
    # each step multiplies the mean by (1 + b dt): the bias against e^{bt} is O(dt)
    b, t = 1.0, 1.0
    rates = ProcessRates(AgeRate.constant(b), AgeRate.constant(0.0))
    base = SimConfig(rates, InitialCondition(1), horizon=t, paths=20_000, seed=21, stepper="fixed_dt",
                     dt=dt, keep_charts=False)
    res = simulate_spatial(SpatialConfig(base, diffusion=0.1))
    n = res.ensemble.totals(t)
    discrete = (1 + b * dt) ** round(t / dt)
    assert abs(n.mean() - discrete) < 4 * n.std(ddof=1) / math.sqrt(n.size)
    bias = math.exp(b * t) - discrete
    assert bias / dt == pytest.approx(0.5 * b * b * t * math.exp(b * t), rel=0.05)
