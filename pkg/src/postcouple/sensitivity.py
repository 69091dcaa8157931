"""Sensitivity analysis for unmeasured confounding.

The outcome model is extended to m_A(X; beta) + A * xi, where xi is a
sensitivity parameter with prior g. Posterior draws of beta obtained under
xi = 0 are reweighted by the likelihood ratio integrated over g, either unit
by unit (each unit gets its own Monte Carlo average) or pooled (one average
of the whole-sample likelihood ratio).

For the bernoulli-logistic family xi shifts the linear predictor by default
(``scale="link"``); ``scale="probability"`` shifts the treated-arm
probabilities directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .data import Dataset
from .errors import DegenerateReweightError, DomainError, PreconditionError
from .estimators import ATESummary
from .pipeline import derive_seeds, sample_posteriors, tilt_and_summarize
from .posteriors import DrawSet, OutcomeModelSpec, PropensityModelSpec, SamplerConfig
from .tilting import TiltConfig, effective_sample_size

_CHUNK_CELLS = 4_000_000
_PROB_EPS = 1e-6


@dataclass(frozen=True)
class XiPrior:
    """Prior g for xi: point(value), triangular(lo, hi, mode) or uniform(lo, hi)."""

    family: str = "point"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    mode: float = 0.0

    def __post_init__(self):
        if self.family not in ("point", "triangular", "uniform"):
            raise DomainError(f"unknown sensitivity prior family {self.family!r}")
        if self.family != "point" and not self.lo < self.hi:
            raise DomainError("interval priors need lo < hi")
        if self.family == "triangular" and not self.lo <= self.mode <= self.hi:
            raise DomainError("triangular mode must lie within [lo, hi]")

    @property
    def mean(self) -> float:
        if self.family == "point":
            return self.value
        if self.family == "uniform":
            return (self.lo + self.hi) / 2
        return (self.lo + self.hi + self.mode) / 3

    @classmethod
    def from_dict(cls, cfg: dict) -> "XiPrior":
        cfg = dict(cfg)
        family = cfg.pop("family", None)
        if family is None:
            raise DomainError("sensitivity prior needs a 'family'")
        if family == "point":
            value = cfg.pop("value", cfg.pop("xi0", 0.0))
            return cls("point", value=float(value))
        allowed = {"lo", "hi"} | ({"mode"} if family == "triangular" else set())
        if set(cfg) - allowed or not {"lo", "hi"} <= set(cfg):
            raise DomainError(f"{family} prior takes fields {sorted(allowed)}")
        return cls(family, **{k: float(v) for k, v in cfg.items()})


@dataclass(frozen=True)
class SensitivitySpec:
    g: XiPrior = field(default_factory=XiPrior)
    M: int = 200
    mode: str = "per-unit"
    scale: str = "link"

    def __post_init__(self):
        if self.M < 1:
            raise DomainError("M must be at least 1")
        if self.mode not in ("per-unit", "pooled"):
            raise DomainError(f"mode must be per-unit or pooled, got {self.mode!r}")
        if self.scale not in ("link", "probability"):
            raise DomainError(f"scale must be link or probability, got {self.scale!r}")


def sample_sensitivity_param(spec: SensitivitySpec | XiPrior, seed: int, count) -> np.ndarray:
    """Inverse-CDF draws from g. ``count`` may be an int or a shape tuple."""
    g = spec.g if isinstance(spec, SensitivitySpec) else spec
    shape = (count,) if np.isscalar(count) else tuple(count)
    if g.family == "point":
        return np.full(shape, float(g.value))
    u = np.random.default_rng(seed).uniform(size=shape)
    lo, hi = g.lo, g.hi
    if g.family == "uniform":
        return lo + (hi - lo) * u
    c = g.mode
    fc = (c - lo) / (hi - lo)
    left = lo + np.sqrt(u * (hi - lo) * (c - lo))
    right = hi - np.sqrt((1 - u) * (hi - lo) * (hi - c))
    return np.where(u < fc, left, right)


def _loglik_gain(spec: OutcomeModelSpec, sens: SensitivitySpec, y, eta, xi, sigma2):
    """-f(xi) + f(0) for treated units.

    ``y`` and ``eta`` are (C, n1, 1) blocks of outcomes and linear predictors,
    ``xi`` is (C, 1, M) and ``sigma2`` (C, 1, 1) or None.
    """
    if spec.family == "bernoulli-logistic":
        if sens.scale == "link":
            def ll(e):
                return y * log_expit(e) + (1 - y) * log_expit(-e)
            return ll(eta + xi) - ll(eta)
        p0 = np.clip(expit(eta), _PROB_EPS, 1 - _PROB_EPS)
        p1 = np.clip(expit(eta) + xi, _PROB_EPS, 1 - _PROB_EPS)
        return y * (np.log(p1) - np.log(p0)) + (1 - y) * (np.log1p(-p1) - np.log1p(-p0))
    r = y - eta
    if spec.family == "gaussian-linear":
        return (2 * xi * r - xi * xi) / (2 * sigma2)
    return spec.learning_rate * (2 * xi * r - xi * xi)


def sensitivity_reweight(beta_draws: DrawSet, d: Dataset, outcome_spec: OutcomeModelSpec | None,
                         spec: SensitivitySpec, seed: int) -> DrawSet:
    """Reweight outcome draws by the g-integrated likelihood ratio.

    Returns a copy with updated log weights and ``aux["xi_shift"]``, the
    per-draw posterior mean of xi for treated units implied by the weights.
    Control units do not depend on xi and cancel from the ratio.
    """
    if beta_draws.block != "beta":
        raise PreconditionError("sensitivity reweighting applies to outcome (beta) draws")
    outcome_spec = outcome_spec or beta_draws.model_spec
    if outcome_spec.family == "gaussian-linear" and "sigma2" not in beta_draws.aux:
        raise PreconditionError("gaussian-linear draws need per-draw sigma2 in aux")
    if outcome_spec.family != "bernoulli-logistic" and spec.scale != "link":
        raise DomainError("probability-scale shifts apply to the bernoulli-logistic family only")
    S = beta_draws.S
    treated = d.a == 1
    Xt = outcome_spec.matrix(d)[treated]
    yt = d.y[treated]
    n1 = len(yt)
    point = spec.g.family == "point"
    M = 1 if point else spec.M
    xi_all = sample_sensitivity_param(spec.g, seed, (S, M))
    sigma_all = beta_draws.aux.get("sigma2")

    log_w = np.empty(S)
    shift = np.empty(S)
    per_unit = spec.mode == "per-unit"
    step = max(1, _CHUNK_CELLS // max(n1 * M, 1))
    for lo in range(0, S, step):
        hi = min(S, lo + step)
        eta = (beta_draws.draws[lo:hi] @ Xt.T)[:, :, None]
        xi = xi_all[lo:hi, None, :]
        sig = None if sigma_all is None else sigma_all[lo:hi, None, None]
        gain = _loglik_gain(outcome_spec, spec, yt[None, :, None], eta, xi, sig)  # (C, n1, M)
        if point:
            log_w[lo:hi] = gain[:, :, 0].sum(axis=1)
            shift[lo:hi] = xi_all[lo:hi, 0]
        elif per_unit:
            log_w[lo:hi] = np.sum(logsumexp(gain, axis=2) - np.log(M), axis=1)
            post = softmax(gain, axis=2)
            shift[lo:hi] = np.mean(np.sum(post * xi, axis=2), axis=1) if n1 else 0.0
        else:
            total = gain.sum(axis=1)  # (C, M)
            log_w[lo:hi] = logsumexp(total, axis=1) - np.log(M)
            shift[lo:hi] = np.sum(softmax(total, axis=1) * xi_all[lo:hi], axis=1)

    combined = beta_draws.log_weights + log_w
    if not np.all(np.isfinite(combined)):
        raise DegenerateReweightError(
            "sensitivity weights are not finite; use a prior g concentrated closer to 0")
    z = combined - combined.max()
    w = np.exp(z)
    ess = effective_sample_size(w / w.sum())
    if ess < 2:
        raise DegenerateReweightError(
            f"sensitivity weights collapsed onto {ess:.2f} effective draws; "
            "use a prior g concentrated closer to 0")
    out = beta_draws.with_log_weights(combined, sensitivity_ess=ess, sensitivity_mode=spec.mode,
                                      sensitivity_scale=spec.scale)
    out.aux["xi_shift"] = shift
    return out


def sensitivity_ate(d: Dataset, specs: tuple[PropensityModelSpec, OutcomeModelSpec],
                    sens: SensitivitySpec, tilt_cfg: TiltConfig | None = None, S: int = 20_000,
                    seed: int = 0, sampler: SamplerConfig | None = None,
                    level: float = 0.95) -> ATESummary:
    """Tilted ATE summary under the sensitivity model.

    The draws of beta are reweighted, then tilted with the shifted moment
    (treated residuals Y - m_1 - xi). The reported contrast is the G-formula
    of m(X; beta) without the shift, i.e. the causal effect once the
    confounding bias xi has been removed from the observed-arm regression.
    With g a point mass at 0 the result equals the plain pipeline's.
    """
    ps_spec, outcome_spec = specs
    tilt_cfg = tilt_cfg or TiltConfig()
    alpha, beta = sample_posteriors(d, ps_spec, outcome_spec, S, seed, sampler)
    beta = sensitivity_reweight(beta, d, outcome_spec, sens, derive_seeds(seed, 5)[4])
    res = tilt_and_summarize(d, alpha, beta, ps_spec, outcome_spec, tilt_cfg, seed, level=level)
    summary = res.summary
    summary.extra.update({"sensitivity_ess": beta.diagnostics["sensitivity_ess"],
                          "xi_prior_mean": sens.g.mean, "mode": sens.mode, "scale": sens.scale})
    return summary
