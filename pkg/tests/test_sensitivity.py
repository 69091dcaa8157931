import numpy as np
import pytest

from postcouple import (Dataset, DegenerateReweightError, DomainError, DrawSet, OutcomeModelSpec,
                        PreconditionError, PropensityModelSpec, SensitivitySpec, TiltConfig, XiPrior,
                        fit, sample_outcome_posterior, sample_sensitivity_param, sensitivity_ate,
                        sensitivity_reweight)
from postcouple.data import Design
from postcouple.simulation import generate_kang_schafer
from postcouple.tilting import effective_sample_size


def _weights(ds: DrawSet) -> np.ndarray:
    z = ds.log_weights - ds.log_weights.max()
    w = np.exp(z)
    return w / w.sum()


@pytest.fixture(scope="module")
def ks300():
    return generate_kang_schafer(300, 41)


@pytest.fixture(scope="module")
def beta300(ks300):
    return sample_outcome_posterior(ks300, OutcomeModelSpec(), 2000, seed=3)


def test_point_draws():
    np.testing.assert_array_equal(sample_sensitivity_param(XiPrior("point", value=0.3), 0, 5), 0.3)


@pytest.mark.parametrize("g,mean", [(XiPrior("triangular", lo=0, hi=0.5, mode=0.5), 1 / 3),
                                    (XiPrior("triangular", lo=-0.5, hi=0, mode=-0.5), -1 / 3)])
def test_triangular_mean(g, mean):
    draws = sample_sensitivity_param(g, 7, 1_000_000)
    assert abs(draws.mean() - mean) < 0.002
    assert abs(g.mean - mean) < 1e-15
    assert draws.min() >= g.lo and draws.max() <= g.hi


def test_triangular_cdf_against_closed_form():
    g = XiPrior("triangular", lo=-1.0, hi=2.0, mode=0.5)
    draws = sample_sensitivity_param(g, 8, 200_000)
    for q in (-0.5, 0.5, 1.5):
        if q <= g.mode:
            cdf = (q - g.lo) ** 2 / ((g.hi - g.lo) * (g.mode - g.lo))
        else:
            cdf = 1 - (g.hi - q) ** 2 / ((g.hi - g.lo) * (g.hi - g.mode))
        assert abs(np.mean(draws <= q) - cdf) < 0.005


def test_prior_validation():
    with pytest.raises(DomainError):
        XiPrior("uniform", lo=1.0, hi=0.0)
    with pytest.raises(DomainError):
        XiPrior("triangular", lo=0.0, hi=1.0, mode=2.0)
    with pytest.raises(DomainError):
        SensitivitySpec(M=0)
    with pytest.raises(DomainError):
        XiPrior.from_dict({"family": "uniform", "lo": 0})
    g = XiPrior.from_dict({"family": "triangular", "lo": 0, "hi": 0.5, "mode": 0.5})
    assert g == XiPrior("triangular", lo=0.0, hi=0.5, mode=0.5)


def test_point_zero_gives_equal_weights(ks300, beta300):
    out = sensitivity_reweight(beta300, ks300, None, SensitivitySpec(XiPrior("point", value=0.0)), 1)
    np.testing.assert_array_equal(out.log_weights, 0.0)


def test_single_unit_hand_ratio():
    d = Dataset(y=[3.0, 0.5], a=[1, 0], x=np.zeros((2, 0)), column_names=())
    spec = OutcomeModelSpec(design=Design(columns=()))
    beta = np.array([[1.0, 0.5], [0.2, 1.0], [2.0, 2.0]])
    ds = DrawSet(draws=beta, log_weights=np.zeros(3), block="beta", model_spec=spec, rng_seed=0,
                 param_names=["b0", "b1"], aux={"sigma2": np.ones(3)})
    xi0 = 0.7
    out = sensitivity_reweight(ds, d, spec, SensitivitySpec(XiPrior("point", value=xi0)), 0)
    r = 3.0 - beta.sum(axis=1)
    np.testing.assert_allclose(out.log_weights, -((r - xi0) ** 2 - r ** 2) / 2, rtol=1e-14)


def test_point_mass_ignores_M_and_mode(ks300, beta300):
    g = XiPrior("point", value=0.05)
    base = sensitivity_reweight(beta300, ks300, None, SensitivitySpec(g, M=1), 1)
    many = sensitivity_reweight(beta300, ks300, None, SensitivitySpec(g, M=10_000), 1)
    pooled = sensitivity_reweight(beta300, ks300, None, SensitivitySpec(g, M=1, mode="pooled"), 1)
    np.testing.assert_array_equal(base.log_weights, many.log_weights)
    np.testing.assert_array_equal(base.log_weights, pooled.log_weights)


def test_shift_invariance(ks300, beta300):
    spec = SensitivitySpec(XiPrior("uniform", lo=-0.1, hi=0.1), M=50)
    a = sensitivity_reweight(beta300, ks300, None, spec, 2)
    shifted = beta300.with_log_weights(beta300.log_weights + 750.0)
    b = sensitivity_reweight(shifted, ks300, None, spec, 2)
    np.testing.assert_allclose(_weights(a), _weights(b), rtol=1e-10)


def test_ess_monotone_in_point_mass(ks300, beta300):
    for sign in (1, -1):
        ess = [effective_sample_size(_weights(sensitivity_reweight(
            beta300, ks300, None, SensitivitySpec(XiPrior("point", value=sign * v)), 0)))
            for v in (0.0, 0.02, 0.05, 0.1, 0.2)]
        assert all(b <= a + 1e-9 for a, b in zip(ess, ess[1:]))


def test_degenerate_weights_rejected(ks300, beta300):
    with pytest.raises(DegenerateReweightError, match="closer to 0"):
        sensitivity_reweight(beta300, ks300, None, SensitivitySpec(XiPrior("point", value=50.0)), 0)


def test_contract_cases(ks300, beta300):
    no_sigma = DrawSet(draws=beta300.draws, log_weights=beta300.log_weights, block="beta",
                       model_spec=beta300.model_spec, rng_seed=0, param_names=beta300.param_names)
    with pytest.raises(PreconditionError):
        sensitivity_reweight(no_sigma, ks300, None, SensitivitySpec(), 0)
    with pytest.raises(DomainError):
        sensitivity_reweight(beta300, ks300, None, SensitivitySpec(scale="probability"), 0)


def test_per_unit_shift_tracks_prior(ks300, beta300):
    g = XiPrior("uniform", lo=-0.05, hi=0.05)
    out = sensitivity_reweight(beta300, ks300, None, SensitivitySpec(g, M=400), 4)
    assert np.all(np.abs(out.aux["xi_shift"]) <= 0.05)


def test_point_zero_ate_matches_fit():
    d = generate_kang_schafer(300, 42)
    specs = (PropensityModelSpec(), OutcomeModelSpec())
    cfg = TiltConfig(method="importance")
    plain = fit(d, *specs, S=4000, seed=5, tilt_cfg=cfg).summary
    sens = sensitivity_ate(d, specs, SensitivitySpec(XiPrior("point", value=0.0)), cfg, S=4000, seed=5)
    assert abs(sens.mean - plain.mean) <= 3 * plain.sd / np.sqrt(plain.ess)
    assert sens.extra["sensitivity_ess"] == pytest.approx(4000)
