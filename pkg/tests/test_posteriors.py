import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit, log_expit

from postcouple import (Dataset, DrawSet, OutcomeModelSpec, PreconditionError, PriorSpec,
                        PropensityModelSpec, SamplerConfig, sample_horseshoe_posterior,
                        sample_outcome_posterior, sample_propensity_posterior)
from postcouple.data import Design
from postcouple.errors import RankDeficientError
from postcouple.posteriors import clip_scores, ClipCounter, general_bayes_posterior
from postcouple.simulation import add_irrelevant_covariates, generate_kang_schafer

FAST = SamplerConfig(burn_in=500, n_chains=4)


@pytest.fixture(scope="module")
def ks300():
    return generate_kang_schafer(300, 21)


def test_conjugate_same_seed_bit_identical(ks300):
    a = sample_outcome_posterior(ks300, OutcomeModelSpec(), 500, seed=4)
    b = sample_outcome_posterior(ks300, OutcomeModelSpec(), 500, seed=4)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.aux["sigma2"], b.aux["sigma2"])
    c = sample_outcome_posterior(ks300, OutcomeModelSpec(), 500, seed=5)
    assert not np.array_equal(a.draws, c.draws)


def test_noiseless_linear_recovers_coefficients():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 1))
    d = Dataset(y=2 + 3 * x[:, 0], a=np.arange(200) % 2, x=x, column_names=("X1",))
    m = sample_outcome_posterior(d, OutcomeModelSpec(), 2000, seed=1).mean()
    assert abs(m[0] - 2) < 0.05 and abs(m[2] - 3) < 0.05 and abs(m[1]) < 0.05


def test_sigma2_tracks_residual_variance(ks300):
    # the intercept of about 100 must not leak into the noise scale
    spec = OutcomeModelSpec()
    X = spec.matrix(ks300)
    resid = ks300.y - X @ np.linalg.lstsq(X, ks300.y, rcond=None)[0]
    s2 = sample_outcome_posterior(ks300, spec, 4000, seed=2).aux["sigma2"]
    assert abs(s2.mean() / (resid @ resid / (ks300.n - X.shape[1])) - 1) < 0.05


def test_sigma2_draws_vary(ks300):
    s2 = sample_outcome_posterior(ks300, OutcomeModelSpec(), 1000, seed=1).aux["sigma2"]
    assert np.unique(s2).size == 1000


def test_empty_dataset_rejected():
    empty = Dataset(y=np.zeros(0), a=np.zeros(0), x=np.zeros((0, 1)), column_names=("x",))
    with pytest.raises(PreconditionError):
        sample_outcome_posterior(empty, OutcomeModelSpec(), 100)


def test_all_treated_rejected(ks300):
    d = Dataset(y=ks300.y, a=np.ones(ks300.n), x=ks300.x, column_names=ks300.column_names)
    with pytest.raises(PreconditionError, match="no control"):
        sample_propensity_posterior(d, PropensityModelSpec(), 100)


def test_rank_deficient_design(ks300):
    x = np.column_stack([ks300.x, ks300.x[:, 0] * 2])
    d = ks300.with_covariates(x, (*ks300.column_names, "dup"))
    with pytest.raises(RankDeficientError):
        sample_outcome_posterior(d, OutcomeModelSpec(), 100)


def test_intercept_only_propensity_against_quadrature():
    a = np.r_[np.ones(60), np.zeros(60)]
    d = Dataset(y=np.zeros(120), a=a, x=np.arange(120.0)[:, None], column_names=("x",))
    spec = PropensityModelSpec(design=Design(columns=()))
    draws = sample_propensity_posterior(d, spec, 8000, seed=2, sampler=FAST)
    est = expit(draws.draws[:, 0]).mean()

    v0 = spec.prior.gaussian_variance

    def log_post(t):
        return 60 * log_expit(t) + 60 * log_expit(-t) - t * t / (2 * v0)

    peak = log_post(0.0)
    num = integrate.quad(lambda t: expit(t) * math.exp(log_post(t) - peak), -5, 5)[0]
    den = integrate.quad(lambda t: math.exp(log_post(t) - peak), -5, 5)[0]
    oracle = num / den
    assert abs(oracle - 0.5) < 1e-12
    assert abs(est - 0.5) < 0.05
    assert abs(est - oracle) < 0.01


def test_logistic_posterior_against_quadrature_asymmetric():
    a = np.r_[np.ones(30), np.zeros(90)]
    d = Dataset(y=np.zeros(120), a=a, x=np.arange(120.0)[:, None], column_names=("x",))
    spec = PropensityModelSpec(design=Design(columns=()))
    draws = sample_propensity_posterior(d, spec, 20000, seed=3, sampler=FAST)
    t = draws.draws[:, 0]
    v0 = spec.prior.gaussian_variance

    def post(u):
        return math.exp(30 * log_expit(u) + 90 * log_expit(-u) - u * u / (2 * v0)
                        - (30 * log_expit(-1.1) + 90 * log_expit(1.1)))

    den = integrate.quad(post, -4, 2)[0]
    mean = integrate.quad(lambda u: u * post(u), -4, 2)[0] / den
    var = integrate.quad(lambda u: (u - mean) ** 2 * post(u), -4, 2)[0] / den
    # autocorrelated chains: allow a generous multiple of the iid standard error
    assert abs(t.mean() - mean) < 6 * math.sqrt(var / len(t))
    assert abs(t.var() / var - 1) < 0.1


def test_propensity_same_seed_and_ignores_outcome(ks300):
    spec = PropensityModelSpec()
    a = sample_propensity_posterior(ks300, spec, 600, seed=9, sampler=FAST)
    b = sample_propensity_posterior(ks300, spec, 600, seed=9, sampler=FAST)
    np.testing.assert_array_equal(a.draws, b.draws)
    perm = np.random.default_rng(0).permutation(ks300.n)
    shuffled = Dataset(y=ks300.y[perm], a=ks300.a, x=ks300.x, column_names=ks300.column_names)
    c = sample_propensity_posterior(shuffled, spec, 600, seed=9, sampler=FAST)
    np.testing.assert_array_equal(a.draws, c.draws)
    assert 0.05 <= a.diagnostics["acceptance_rate"] <= 0.8


def test_propensity_recovers_truth():
    d = generate_kang_schafer(2000, 1)
    draws = sample_propensity_posterior(d, PropensityModelSpec(), 4000, seed=1, sampler=FAST)
    m, sd = draws.mean(), draws.draws.std(axis=0)
    truth = np.array([0.0, 1.0, -0.5, 0.25, 0.1])
    assert np.all(np.abs(m - truth) < 4 * sd)


def test_general_bayes_closed_form(ks300):
    spec = OutcomeModelSpec(family="general-bayes-squared-loss", learning_rate=0.5)
    X = spec.matrix(ks300)
    prec = 2 * 0.5 * X.T @ X + np.eye(X.shape[1]) / 100
    mean = np.linalg.solve(prec, X.T @ ks300.y)
    m, cov = general_bayes_posterior(ks300, spec)
    np.testing.assert_allclose(m, mean, rtol=1e-10)
    np.testing.assert_allclose(cov, np.linalg.inv(prec), rtol=1e-8)
    draws = sample_outcome_posterior(ks300, spec, 20000, seed=2)
    se = np.sqrt(np.diag(cov) / 20000)
    assert np.all(np.abs(draws.draws.mean(axis=0) - mean) < 4 * se)


def test_bernoulli_outcome_draws():
    rng = np.random.default_rng(5)
    d0 = generate_kang_schafer(400, 5)
    y = (rng.uniform(size=400) < expit(0.5 * d0.a - 0.3 + 0.4 * d0.x[:, 0])).astype(float)
    d = Dataset(y=y, a=d0.a, x=d0.x, column_names=d0.column_names)
    draws = sample_outcome_posterior(d, OutcomeModelSpec(family="bernoulli-logistic"), 3000,
                                     seed=1, sampler=FAST)
    assert draws.k == 6
    assert abs(draws.mean()[1] - 0.5) < 4 * draws.draws[:, 1].std()


def test_drawset_csv_round_trip(tmp_path, ks300):
    draws = sample_outcome_posterior(ks300, OutcomeModelSpec(), 50, seed=1)
    draws = draws.with_log_weights(np.linspace(-1, 0, 50))
    back = DrawSet.from_csv(draws.to_csv(tmp_path / "draws.csv"), "beta")
    np.testing.assert_array_equal(back.draws, draws.draws)
    np.testing.assert_array_equal(back.log_weights, draws.log_weights)
    np.testing.assert_array_equal(back.aux["sigma2"], draws.aux["sigma2"])
    assert back.param_names == draws.param_names


def test_clip_scores_counts():
    counter = ClipCounter()
    out = clip_scores(np.array([0.0, 0.5, 1.0, 1e-5]), counter)
    np.testing.assert_array_equal(out, [1e-3, 0.5, 1 - 1e-3, 1e-3])
    assert counter.count == 3


@pytest.fixture(scope="module")
def high_dim():
    d = generate_kang_schafer(200, 31)
    return add_irrelevant_covariates(d, 40, 32)


def test_horseshoe_same_seed(high_dim):
    a = sample_horseshoe_posterior(high_dim, "beta", 300, seed=3, sampler=FAST)
    b = sample_horseshoe_posterior(high_dim, "beta", 300, seed=3, sampler=FAST)
    np.testing.assert_array_equal(a.draws, b.draws)


def test_horseshoe_shrinks_null_coefficients(high_dim):
    draws = sample_horseshoe_posterior(high_dim, "beta", 3000, seed=4, sampler=FAST)
    coef = draws.mean()[2:]
    signal, null = coef[:4], coef[4:]
    assert np.abs(null).mean() < 0.25 * np.abs(signal).min()
    # independent least-squares fit agrees on signs and on the dominant signal
    # (the other three true coefficients are tied)
    X = OutcomeModelSpec().matrix(high_dim)
    ols = np.linalg.lstsq(X, high_dim.y, rcond=None)[0][2:6]
    np.testing.assert_array_equal(np.sign(signal), np.sign(ols))
    assert np.argmax(np.abs(signal)) == np.argmax(np.abs(ols)) == 0


def test_horseshoe_matches_gaussian_prior_for_one_strong_signal():
    rng = np.random.default_rng(8)
    n = 500
    x = rng.standard_normal((n, 1))
    a = (rng.uniform(size=n) < 0.5).astype(float)
    y = 1 + 2 * a + 3 * x[:, 0] + rng.standard_normal(n)
    d = Dataset(y=y, a=a, x=x, column_names=("x",))
    hs = sample_horseshoe_posterior(d, "beta", 4000, seed=1, sampler=FAST).mean()
    gauss = sample_outcome_posterior(d, OutcomeModelSpec(), 4000, seed=1).mean()
    assert abs(hs[2] - gauss[2]) < 0.1


def test_horseshoe_propensity_block(high_dim):
    spec = PropensityModelSpec(prior=PriorSpec("horseshoe"))
    draws = sample_horseshoe_posterior(high_dim, "alpha", 1500, seed=6, spec=spec, sampler=FAST)
    coef = draws.mean()[1:]
    assert np.abs(coef[0]) > 3 * np.abs(coef[4:]).mean()
