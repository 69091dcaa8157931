"""ATE inference from (tilted) posteriors, plus the comparison estimators."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import DiagnosticWarning, DomainError, PreconditionError, TooManyFailuresError
from .posteriors import (ClipCounter, DrawSet, OutcomeModelSpec, PropensityModelSpec,
                         clip_scores)
from .tilting import ParticleSystem, effective_sample_size

_CHUNK_CELLS = 2_000_000


@dataclass
class ATEPosterior:
    draws: np.ndarray
    weights: np.ndarray
    source: str

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.draws) != len(self.weights):
            raise DomainError("draws and weights have different lengths")
        if self.source not in ("tilted", "original", "saarela"):
            raise DomainError(f"unknown ATE source {self.source!r}")


@dataclass
class ATESummary:
    mean: float
    ci_low: float
    ci_high: float
    level: float
    ess: float
    sd: float = float("nan")
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self, method: str | None = None, n: int | None = None,
                seed: int | None = None) -> dict:
        out = {"method": method, "mean": self.mean, "ci": [self.ci_low, self.ci_high],
               "level": self.level, "ess": self.ess, "sd": self.sd, "n": n, "seed": seed}
        out.update(self.extra)
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw))


def _check_simplex(w: np.ndarray) -> None:
    if np.any(~np.isfinite(w)) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise DomainError("weights must be a simplex vector")


def ate_draws(source, d: Dataset, outcome_spec: OutcomeModelSpec | None = None) -> ATEPosterior:
    """G-formula ATE for each draw: mean over units of m_1(X_i; beta) - m_0(X_i; beta).

    ``source`` is a :class:`ParticleSystem` (tilted) or a beta :class:`DrawSet`
    (original posterior, using its normalized weights). For the
    bernoulli-logistic family the contrast is a risk difference.
    """
    if isinstance(source, ParticleSystem):
        beta, weights, kind = source.beta_particles, source.weights, "tilted"
    elif isinstance(source, DrawSet):
        if source.block != "beta":
            raise DomainError("ATE draws need the outcome (beta) block")
        beta, weights, kind = source.draws, source.weights, "original"
        outcome_spec = outcome_spec or source.model_spec
    else:
        raise DomainError(f"cannot compute ATE draws from {type(source).__name__}")
    if outcome_spec is None:
        raise DomainError("an outcome model specification is required")
    X1 = outcome_spec.matrix(d, treat=1)
    X0 = outcome_spec.matrix(d, treat=0)
    if beta.shape[1] != X1.shape[1]:
        raise DomainError(f"beta has {beta.shape[1]} coordinates, model expects {X1.shape[1]}")
    if outcome_spec.family == "bernoulli-logistic":
        out = np.empty(beta.shape[0])
        step = max(1, _CHUNK_CELLS // d.n)
        for lo in range(0, beta.shape[0], step):
            b = beta[lo:lo + step].T
            out[lo:lo + step] = np.mean(expit(X1 @ b) - expit(X0 @ b), axis=0)
    else:
        out = beta @ (X1 - X0).mean(axis=0)
    return ATEPosterior(draws=out, weights=weights, source=kind)


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Quantiles of a weighted sample, interpolating between weight midpoints."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    keep = w > 0
    v, w = v[keep], w[keep] / w[keep].sum()
    mid = np.cumsum(w) - 0.5 * w
    return np.interp(q, mid, v)


def summarize(ap: ATEPosterior, level: float = 0.95) -> ATESummary:
    """Weighted mean and equal-tailed weighted credible interval."""
    if len(ap.draws) < 2:
        raise PreconditionError("at least 2 draws are needed")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    _check_simplex(ap.weights)
    w = ap.weights
    mean = float(w @ ap.draws)
    sd = math.sqrt(max(float(w @ (ap.draws - mean) ** 2), 0.0))
    lo, hi = weighted_quantile(ap.draws, w, [(1 - level) / 2, 1 - (1 - level) / 2])
    return ATESummary(mean=mean, ci_low=float(lo), ci_high=float(hi), level=level,
                      ess=effective_sample_size(w), sd=sd)


# ----------------------------------------------------------------------------
# frequentist estimators


def ipw_estimate(d: Dataset, ps_values, clip_counter: ClipCounter | None = None) -> float:
    """Inverse probability weighting estimate of the ATE."""
    e = np.asarray(ps_values, dtype=float)
    if e.shape != (d.n,):
        raise DomainError(f"expected {d.n} propensity scores, got shape {e.shape}")
    e = clip_scores(e, clip_counter)
    return float(np.mean(d.a * d.y / e - (1 - d.a) * d.y / (1 - e)))


@dataclass
class DREstimate:
    estimate: float
    se: float

    def __iter__(self):
        return iter((self.estimate, self.se))

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        from scipy.stats import norm
        z = norm.ppf(0.5 + level / 2)
        return self.estimate - z * self.se, self.estimate + z * self.se


def frequentist_dr(d: Dataset, ps_values, m1_values, m0_values,
                   clip_counter: ClipCounter | None = None) -> DREstimate:
    """AIPW point estimate with the plug-in standard error sd(summand) / sqrt(n).

    The standard error ignores estimation noise in the nuisance fits.
    """
    e, m1, m0 = (np.asarray(v, dtype=float) for v in (ps_values, m1_values, m0_values))
    for name, v in (("ps_values", e), ("m1_values", m1), ("m0_values", m0)):
        if v.shape != (d.n,):
            raise DomainError(f"{name} must have length {d.n}")
    e = clip_scores(e, clip_counter)
    a, y = d.a, d.y
    # written as ipw + augmentation so that m = 0 reproduces ipw_estimate exactly
    summand = a * y / e - (1 - a) * y / (1 - e) - (a - e) / e * m1 - (a - e) / (1 - e) * m0
    est = float(np.mean(summand))
    se = float(np.std(summand, ddof=1) / math.sqrt(d.n))
    return DREstimate(est, se)


def fit_logistic(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None,
                 max_iter: int = 50, tol: float = 1e-10):
    """Weighted logistic maximum likelihood, batched over rows of ``weights``.

    ``weights`` is (B, n) or (n,) or None. Returns (coef (B, k), converged (B,)).
    """
    n, k = X.shape
    W = np.ones((1, n)) if weights is None else np.atleast_2d(np.asarray(weights, dtype=float))
    Bn = W.shape[0]
    coef = np.zeros((Bn, k))
    converged = np.zeros(Bn, dtype=bool)
    for _ in range(max_iter):
        p = expit(coef @ X.T)
        grad = (W * (y[None, :] - p)) @ X
        H = np.matmul((W * p * (1 - p))[:, None, :] * X.T[None, :, :], X)
        H += 1e-10 * np.eye(k)
        try:
            step = np.linalg.solve(H, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        step = np.where(np.isfinite(step), step, 0.0)
        coef = coef + step
        done = np.max(np.abs(step), axis=1) < tol
        converged |= done
        if converged.all() or np.max(np.abs(coef)) > 1e3:
            break
    converged &= np.all(np.abs(coef) < 50, axis=1) & np.all(np.isfinite(coef), axis=1)
    return coef, converged


def fit_ols(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted least squares, batched over rows of ``weights``. Returns (B, k)."""
    n, k = X.shape
    W = np.ones((1, n)) if weights is None else np.atleast_2d(np.asarray(weights, dtype=float))
    XtWX = np.matmul(W[:, None, :] * X.T[None, :, :], X)
    XtWy = (W * y[None, :]) @ X
    return np.linalg.solve(XtWX, XtWy[..., None])[..., 0]


def _fit_outcome(X, y, family, weights=None):
    if family == "bernoulli-logistic":
        coef, ok = fit_logistic(X, y, weights)
        return coef, ok
    coef = fit_ols(X, y, weights)
    return coef, np.all(np.isfinite(coef), axis=1)


def nuisance_fits(d: Dataset, ps_spec: PropensityModelSpec, outcome_spec: OutcomeModelSpec):
    """Maximum-likelihood propensity scores and outcome predictions (e, m1, m0)."""
    Xp = ps_spec.matrix(d)
    alpha, ok = fit_logistic(Xp, d.a)
    if not ok[0]:
        warnings.warn("propensity fit did not converge (possible separation)", DiagnosticWarning)
    e = expit(Xp @ alpha[0])
    Xo = outcome_spec.matrix(d)
    beta, _ = _fit_outcome(Xo, d.y, outcome_spec.family)
    m1 = outcome_spec.mean(outcome_spec.matrix(d, 1) @ beta[0])
    m0 = outcome_spec.mean(outcome_spec.matrix(d, 0) @ beta[0])
    return e, m1, m0


def frequentist_dr_fit(d: Dataset, ps_spec: PropensityModelSpec,
                       outcome_spec: OutcomeModelSpec) -> DREstimate:
    """AIPW with maximum-likelihood nuisance fits."""
    e, m1, m0 = nuisance_fits(d, ps_spec, outcome_spec)
    return frequentist_dr(d, e, m1, m0)


def bang_robins_dr(d: Dataset, ps_values, outcome_spec: OutcomeModelSpec) -> float:
    """Clever-covariate DR estimate (gaussian-linear outcome).

    Adds (A - e) / (e (1 - e)) to the outcome design, refits by least squares
    and returns the G-formula contrast of the augmented fit.
    """
    e = clip_scores(np.asarray(ps_values, dtype=float))
    h_obs = (d.a - e) / (e * (1 - e))
    X = np.column_stack([outcome_spec.matrix(d), h_obs])
    coef = fit_ols(X, d.y)[0]
    X1 = np.column_stack([outcome_spec.matrix(d, 1), 1.0 / e])
    X0 = np.column_stack([outcome_spec.matrix(d, 0), -1.0 / (1 - e)])
    return float(np.mean(X1 @ coef - X0 @ coef))


def saarela_bootstrap_dr(d: Dataset, B: int, seed: int,
                         ps_spec: PropensityModelSpec | None = None,
                         outcome_spec: OutcomeModelSpec | None = None,
                         xi: np.ndarray | None = None, max_skip_fraction: float = 0.1) -> ATEPosterior:
    """Bayesian-bootstrap DR estimator.

    Each replicate draws Dirichlet(1, ..., 1) unit weights, refits both nuisance
    models with those weights and evaluates the weighted DR sum. ``xi`` (B x n)
    overrides the Dirichlet draws, for testing.
    """
    if B < 100:
        raise PreconditionError("at least 100 bootstrap replicates are required")
    ps_spec = ps_spec or PropensityModelSpec()
    outcome_spec = outcome_spec or OutcomeModelSpec()
    rng = np.random.default_rng(seed)
    if xi is None:
        xi = rng.dirichlet(np.ones(d.n), size=B)
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if xi.shape != (B, d.n):
        raise DomainError(f"bootstrap weights must have shape ({B}, {d.n})")
    scaled = xi * d.n
    Xp = ps_spec.matrix(d)
    alpha, ok_a = fit_logistic(Xp, d.a, scaled)
    Xo = outcome_spec.matrix(d)
    beta, ok_b = _fit_outcome(Xo, d.y, outcome_spec.family, scaled)
    ok = ok_a & ok_b
    skipped = int((~ok).sum())
    if skipped > max_skip_fraction * B:
        raise TooManyFailuresError(f"{skipped} of {B} bootstrap replicates failed to fit")
    if skipped:
        warnings.warn(f"skipped {skipped} bootstrap replicates with failed fits", DiagnosticWarning)
    alpha, beta, xi = alpha[ok], beta[ok], xi[ok]
    e = clip_scores(expit(alpha @ Xp.T))
    m_obs = outcome_spec.mean(beta @ Xo.T)
    m1 = outcome_spec.mean(beta @ outcome_spec.matrix(d, 1).T)
    m0 = outcome_spec.mean(beta @ outcome_spec.matrix(d, 0).T)
    a, y = d.a[None, :], d.y[None, :]
    terms = m1 - m0 + (a - e) / (e * (1 - e)) * (y - m_obs)
    draws = np.sum(xi * terms, axis=1)
    ap = ATEPosterior(draws=draws, weights=np.full(len(draws), 1.0 / len(draws)), source="saarela")
    return ap
