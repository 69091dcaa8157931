import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postcouple import (ATEPosterior, Dataset, DomainError, DrawSet, OutcomeModelSpec,
                        PropensityModelSpec, ate_draws, bang_robins_dr, frequentist_dr,
                        frequentist_dr_fit, ipw_estimate, saarela_bootstrap_dr, summarize)
from postcouple.estimators import fit_logistic, fit_ols, nuisance_fits, weighted_quantile
from postcouple.posteriors import ClipCounter
from postcouple.simulation import TRUE_ATE, apply_misspecification, generate_kang_schafer


def _beta_draws(draws, spec, d=None):
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    S = draws.shape[0]
    return DrawSet(draws=draws, log_weights=np.zeros(S), block="beta", model_spec=spec, rng_seed=0,
                   param_names=[f"b{j}" for j in range(draws.shape[1])])


def test_linear_ate_equals_treatment_coefficient(small_dataset):
    spec = OutcomeModelSpec()
    rng = np.random.default_rng(0)
    draws = rng.normal(size=(20, 4))
    draws[:, 1] = 110.0
    ap = ate_draws(_beta_draws(draws, spec), small_dataset, spec)
    np.testing.assert_allclose(ap.draws, 110.0, rtol=1e-14)
    assert ap.source == "original"


def test_logistic_intercept_only_ate_is_zero(small_dataset):
    spec = OutcomeModelSpec(family="bernoulli-logistic")
    ap = ate_draws(_beta_draws([[0.7, 0.0, 0.0, 0.0]] * 2, spec), small_dataset, spec)
    np.testing.assert_array_equal(ap.draws, 0.0)


def test_hand_average_ate():
    d = Dataset(y=[0.0, 1.0], a=[1, 0], x=[[0.0], [1.0]], column_names=("x",))
    spec = OutcomeModelSpec(family="bernoulli-logistic")
    ap = ate_draws(_beta_draws([[0.0, 1.0, 1.0]] * 2, spec), d, spec)

    def expit(t):
        return 1 / (1 + math.exp(-t))

    # unit 1: m1 = expit(1), m0 = expit(0); unit 2: m1 = expit(2), m0 = expit(1)
    expected = ((expit(1) - expit(0)) + (expit(2) - expit(1))) / 2
    np.testing.assert_allclose(ap.draws, expected, rtol=1e-14)


def test_ate_dimension_mismatch(small_dataset):
    spec = OutcomeModelSpec()
    with pytest.raises(DomainError):
        ate_draws(_beta_draws([[1.0, 2.0], [1.0, 2.0]], spec), small_dataset, spec)


def test_summarize_examples():
    s = summarize(ATEPosterior(np.array([1.0, 2.0, 3.0]), np.full(3, 1 / 3), "original"))
    assert s.mean == pytest.approx(2.0)
    s = summarize(ATEPosterior(np.array([0.0, 10.0]), np.array([0.9, 0.1]), "original"))
    assert s.mean == pytest.approx(1.0)
    z = np.random.default_rng(0).standard_normal(10_000)
    s = summarize(ATEPosterior(z, np.full(10_000, 1e-4), "original"))
    assert abs(s.ci_low + 1.96) < 0.05 and abs(s.ci_high - 1.96) < 0.05


def test_summarize_rejects_non_simplex():
    with pytest.raises(DomainError):
        summarize(ATEPosterior(np.array([1.0, 2.0]), np.array([0.7, 0.7]), "original"))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(0.01, 1.0)), min_size=2, max_size=30),
       st.randoms(use_true_random=False))
def test_summarize_permutation_invariant(pairs, rnd):
    v = np.array([p[0] for p in pairs])
    w = np.array([p[1] for p in pairs])
    w = w / w.sum()
    a = summarize(ATEPosterior(v, w, "original"))
    perm = list(range(len(v)))
    rnd.shuffle(perm)
    b = summarize(ATEPosterior(v[perm], w[perm], "original"))
    assert b.mean == pytest.approx(a.mean, rel=1e-12, abs=1e-9)
    assert b.ci_low == pytest.approx(a.ci_low, rel=1e-12, abs=1e-9)
    assert b.ci_high == pytest.approx(a.ci_high, rel=1e-12, abs=1e-9)


def test_weighted_quantile_uniform_matches_numpy_midpoints():
    v = np.arange(1.0, 11.0)
    q = weighted_quantile(v, np.full(10, 0.1), [0.05, 0.5, 0.95])
    np.testing.assert_allclose(q, [1.0, 5.5, 10.0])


def test_ipw_examples():
    d = Dataset(y=[2.0, 2.0], a=[1, 0], x=[[0.0], [1.0]], column_names=("x",))
    assert ipw_estimate(d, [0.5, 0.5]) == 0.0
    d0 = Dataset(y=[0.0, 0.0], a=[1, 0], x=[[0.0], [1.0]], column_names=("x",))
    assert ipw_estimate(d0, [0.3, 0.8]) == 0.0
    counter = ClipCounter()
    val = ipw_estimate(d, [0.0, 0.5], counter)
    assert counter.count == 1 and math.isfinite(val)
    with pytest.raises(DomainError):
        ipw_estimate(d, [0.5])


def test_dr_reductions(small_dataset):
    rng = np.random.default_rng(1)
    e = rng.uniform(0.2, 0.8, small_dataset.n)
    zero = np.zeros(small_dataset.n)
    assert frequentist_dr(small_dataset, e, zero, zero).estimate == ipw_estimate(small_dataset, e)
    # perfect outcome model: residuals vanish and the estimate is the regression contrast
    m1 = small_dataset.y + 2.0 * (1 - small_dataset.a)
    m0 = small_dataset.y - 2.0 * small_dataset.a
    perfect = Dataset(y=small_dataset.a * m1 + (1 - small_dataset.a) * m0, a=small_dataset.a,
                      x=small_dataset.x, column_names=small_dataset.column_names)
    est = frequentist_dr(perfect, e, m1, m0).estimate
    assert est == pytest.approx(np.mean(m1 - m0), rel=1e-12)
    with pytest.raises(DomainError):
        frequentist_dr(small_dataset, e[:-1], zero, zero)


def test_fit_helpers_against_numpy():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(300), rng.standard_normal((300, 2))])
    y = X @ np.array([1.0, -2.0, 0.5]) + rng.standard_normal(300)
    np.testing.assert_allclose(fit_ols(X, y)[0], np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-10)
    p = 1 / (1 + np.exp(-(X @ np.array([0.2, 1.0, -1.0]))))
    t = (rng.uniform(size=300) < p).astype(float)
    coef, ok = fit_logistic(X, t)
    assert ok[0]
    grad = X.T @ (t - 1 / (1 + np.exp(-X @ coef[0])))
    assert np.max(np.abs(grad)) < 1e-8


def test_bang_robins_matches_aipw_under_correct_models():
    d = generate_kang_schafer(2000, 3)
    e, m1, m0 = nuisance_fits(d, PropensityModelSpec(), OutcomeModelSpec())
    br = bang_robins_dr(d, e, OutcomeModelSpec())
    aipw = frequentist_dr(d, e, m1, m0).estimate
    assert abs(br - aipw) < 0.05


def test_frequentist_dr_benchmark_n1500():
    ests, cover = [], []
    for j in range(200):
        d = generate_kang_schafer(1500, 50_000 + j)
        est = frequentist_dr_fit(d, PropensityModelSpec(), OutcomeModelSpec())
        lo, hi = est.interval()
        ests.append(est.estimate)
        cover.append(lo <= TRUE_ATE <= hi)
    assert abs(np.mean(ests) - TRUE_ATE) < 0.02
    assert 92 <= 100 * np.mean(cover) <= 97


@pytest.mark.parametrize("which", ["outcome", "ps"])
def test_frequentist_dr_double_robustness(which):
    ests = []
    for j in range(100):
        d = generate_kang_schafer(5000, 60_000 + j)
        ps_design, out_design = apply_misspecification(d, which)
        est = frequentist_dr_fit(d, PropensityModelSpec(design=ps_design),
                                 OutcomeModelSpec(design=out_design))
        ests.append(est.estimate)
    assert abs(np.mean(ests) - TRUE_ATE) < 0.1


def test_saarela_uniform_weights_reduce_to_aipw():
    d = generate_kang_schafer(300, 4)
    xi = np.full((100, d.n), 1 / d.n)
    ap = saarela_bootstrap_dr(d, 100, 0, xi=xi)
    aipw = frequentist_dr_fit(d, PropensityModelSpec(), OutcomeModelSpec()).estimate
    np.testing.assert_allclose(ap.draws, aipw, rtol=1e-10)


def test_saarela_benchmark_and_determinism():
    d = generate_kang_schafer(500, 6)
    ap = saarela_bootstrap_dr(d, 500, 11)
    s = summarize(ap)
    # one dataset: the posterior mean sits within a few posterior sds of the truth
    assert abs(s.mean - TRUE_ATE) < 3 * s.sd
    again = saarela_bootstrap_dr(d, 500, 11)
    np.testing.assert_array_equal(ap.draws, again.draws)


def test_saarela_contract():
    d = generate_kang_schafer(100, 1)
    with pytest.raises(Exception):
        saarela_bootstrap_dr(d, 10, 0)
    with pytest.raises(DomainError):
        saarela_bootstrap_dr(d, 100, 0, xi=np.ones((5, d.n)))
