import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postcouple import (DomainError, OutcomeModelSpec, SamplerConfig, SelectionEmptyError,
                        TiltConfig, coupled_selection, fit, select_confounders, standardize_covariates)
from postcouple.data import Design
from postcouple.moments import MomentEvaluator, selected_propensity_spec
from postcouple.pipeline import derive_seeds
from postcouple.posteriors import PriorSpec, PropensityModelSpec, sample_horseshoe_posterior
from postcouple.selection import SelectionConfig, coupled_selection_result
from postcouple.simulation import TRUE_ATE, generate_kang_schafer

FAST = SamplerConfig(burn_in=500, n_chains=4)


def test_threshold_example():
    assert select_confounders([0.5, 0.005, -0.02], 0.01) == (0, 2)


def test_threshold_must_be_positive():
    with pytest.raises(DomainError):
        select_confounders([0.5, 0.005], 0.0)
    with pytest.raises(DomainError):
        SelectionConfig(threshold=0.0)


def test_empty_selection_suggests_lower_threshold():
    with pytest.raises(SelectionEmptyError, match="lower threshold"):
        select_confounders([0.001, -0.002], 0.01)


def test_fifty_eight_candidates():
    rng = np.random.default_rng(0)
    big = rng.uniform(0.0101, 1.0, 44) * rng.choice([-1, 1], 44)
    small = rng.uniform(0.0, 0.0099, 14) * rng.choice([-1, 1], 14)
    means = rng.permutation(np.r_[big, small])
    assert len(select_confounders(means, 0.01)) == 44


def test_intercept_is_excluded_from_thresholding():
    # leading entry is the intercept when n_unpenalized = 1
    assert select_confounders([5.0, 0.5, 0.0], 0.01, n_unpenalized=1) == (0,)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(1e-4, 1), st.floats(1e-4, 1))
def test_monotone_threshold(means, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)

    def sel(t):
        try:
            return set(select_confounders(means, t))
        except SelectionEmptyError:
            return set()

    assert sel(lo) >= sel(hi)


@pytest.fixture(scope="module")
def ks500():
    return generate_kang_schafer(500, 7)


@pytest.fixture(scope="module")
def dropped_x1(ks500):
    return coupled_selection_result(ks500, S_draws=3000, seed=2, sampler=FAST, force_selected=[1, 2, 3])


def test_frozen_outcome_coordinates_keep_initial_values(ks500, dropped_x1):
    d = standardize_covariates(ks500)
    spec = OutcomeModelSpec(prior=PriorSpec("horseshoe", 100.0))
    beta0 = sample_horseshoe_posterior(d, "beta", 3000, derive_seeds(2, 4)[1], spec=spec, sampler=FAST)
    assert dropped_x1.selected == ["X2", "X3", "X4"] and dropped_x1.dropped == ["X1"]
    x1 = 2  # intercept, treatment, X1
    assert set(dropped_x1.particles.beta_particles[:, x1]) <= set(beta0.draws[:, x1])
    moving = dropped_x1.particles.beta_particles[:, x1 + 1]
    assert not set(moving) <= set(beta0.draws[:, x1 + 1])


def test_selected_moment_constraint_at_termination(ks500, dropped_x1):
    ps = dropped_x1.particles
    d = standardize_covariates(ks500)
    ps_spec = selected_propensity_spec(PropensityModelSpec(prior=PriorSpec("horseshoe", 100.0)),
                                       d, (1, 2, 3))
    B = MomentEvaluator(d, ps_spec, OutcomeModelSpec())(ps.alpha_particles, ps.beta_particles)
    np.testing.assert_allclose(B, ps.moment_values, rtol=1e-10, atol=1e-10)
    assert abs(ps.mean_moment) <= TiltConfig().tolerance(B, ps.weights)


def test_full_set_matches_plain_pipeline(ks500):
    # same horseshoe posteriors on the same standardized data; with S the full
    # set the selected moment is the DR moment, so only Monte Carlo noise differs.
    # The Monte Carlo se comes from the spread over independent seeds.
    hs = PriorSpec("horseshoe", 100.0)
    std = standardize_covariates(ks500)
    sel, plain = [], []
    for s in range(8):
        res = coupled_selection(ks500, S_draws=3000, seed=s, sampler=FAST, cfg=SelectionConfig(1e-4))
        assert res.extra["selected"] == ["X1", "X2", "X3", "X4"]
        sel.append(res.mean)
        plain.append(fit(std, PropensityModelSpec(prior=hs), OutcomeModelSpec(prior=hs), S=3000,
                         seed=s, sampler=FAST).summary.mean)
    se = np.sqrt(np.var(sel, ddof=1) / 8 + np.var(plain, ddof=1) / 8)
    assert abs(np.mean(sel) - np.mean(plain)) < 3 * se


def test_missing_confounder_increases_bias():
    # outcome model on X1 only, so the propensity model carries the X2 confounding
    outcome = OutcomeModelSpec(design=Design(columns=("X1",)))
    full, missing = [], []
    for s in range(3):
        d = generate_kang_schafer(500, 70 + s)
        full.append(coupled_selection_result(d, outcome, S_draws=3000, seed=s, sampler=FAST,
                                             force_selected=[0, 1, 2, 3]).summary.mean)
        missing.append(coupled_selection_result(d, outcome, S_draws=3000, seed=s, sampler=FAST,
                                                force_selected=[0, 2, 3]).summary.mean)
    assert abs(np.mean(missing) - TRUE_ATE) > abs(np.mean(full) - TRUE_ATE)


def test_report_json(dropped_x1):
    rep = json.loads(dropped_x1.to_json())
    assert set(rep) == {"threshold", "selected", "dropped", "ate"}
    assert rep["ate"]["method"] == "coupled-selection"
