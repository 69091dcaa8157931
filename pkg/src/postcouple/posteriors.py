"""Independent posteriors for the outcome model (beta) and the propensity model (alpha).

Each sampler returns a :class:`DrawSet`. The two blocks are generated
independently: the propensity sampler never reads the outcome, and the
outcome sampler never touches the propensity model.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit, log_expit

from .data import Dataset, Design, validate
from .errors import (DiagnosticWarning, DomainError, PreconditionError,
                     RankDeficientError)

FAMILIES = ("gaussian-linear", "bernoulli-logistic", "general-bayes-squared-loss")
PS_CLIP = 1e-3

DEFAULT_DRAWS = 20_000
DEFAULT_BURN_IN = 5_000


# ----------------------------------------------------------------------------
# model specifications


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "gaussian"
    gaussian_variance: float = 100.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "horseshoe"):
            raise DomainError(f"unknown prior kind {self.kind!r}")
        if not self.gaussian_variance > 0:
            raise DomainError("gaussian prior variance must be positive")


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Outcome regression m_a(X; beta).

    The design is ``[intercept, treatment, covariates...]``. The treatment
    enters as a main effect only (no treatment-covariate interactions).
    """

    family: str = "gaussian-linear"
    learning_rate: float = 1.0
    include_treatment_main_effect: bool = True
    design: Design = field(default_factory=Design)
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown outcome family {self.family!r}")
        if not self.learning_rate > 0:
            raise DomainError("learning rate must be positive")

    def param_names(self, d: Dataset) -> list[str]:
        _, cov_names = self.design.covariates(d)
        names = ["(Intercept)"] if self.design.intercept else []
        if self.include_treatment_main_effect:
            names.append("treatment")
        return names + list(cov_names)

    def n_params(self, d: Dataset) -> int:
        return (int(self.design.intercept) + int(self.include_treatment_main_effect)
                + self.design.n_covariates(d))

    def n_unpenalized(self) -> int:
        return int(self.design.intercept) + int(self.include_treatment_main_effect)

    def matrix(self, d: Dataset, treat=None) -> np.ndarray:
        """Design matrix with the treatment column set to ``treat`` (observed if None)."""
        cov, _ = self.design.covariates(d)
        cols = []
        if self.design.intercept:
            cols.append(np.ones(d.n))
        if self.include_treatment_main_effect:
            cols.append(d.a if treat is None else np.full(d.n, float(treat)))
        out = np.column_stack(cols + [cov]) if cols else np.asarray(cov, dtype=float)
        return np.ascontiguousarray(out)

    def mean(self, linpred: np.ndarray) -> np.ndarray:
        if self.family == "bernoulli-logistic":
            return expit(linpred)
        return linpred


@dataclass(frozen=True)
class PropensityModelSpec:
    """Logistic propensity model e(X; alpha)."""

    design: Design = field(default_factory=Design)
    prior: PriorSpec = field(default_factory=PriorSpec)

    def param_names(self, d: Dataset) -> list[str]:
        _, cov_names = self.design.covariates(d)
        return (["(Intercept)"] if self.design.intercept else []) + list(cov_names)

    def n_params(self, d: Dataset) -> int:
        return int(self.design.intercept) + self.design.n_covariates(d)

    def n_unpenalized(self) -> int:
        return int(self.design.intercept)

    def matrix(self, d: Dataset) -> np.ndarray:
        cov, _ = self.design.covariates(d)
        if self.design.intercept:
            return np.ascontiguousarray(np.column_stack([np.ones(d.n), cov]))
        return np.ascontiguousarray(cov, dtype=float)


@dataclass(frozen=True)
class SamplerConfig:
    """Settings for the MCMC samplers (ignored by the exact samplers)."""

    burn_in: int = DEFAULT_BURN_IN
    thin: int = 1
    n_chains: int = 1
    target_accept: float = 0.3
    adapt_interval: int = 50


class ClipCounter:
    """Counts propensity evaluations that were clipped into [PS_CLIP, 1 - PS_CLIP]."""

    def __init__(self):
        self.count = 0

    def __repr__(self):
        return f"ClipCounter(count={self.count})"


def clip_scores(e: np.ndarray, counter: ClipCounter | None = None) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    clipped = np.clip(e, PS_CLIP, 1.0 - PS_CLIP)
    if counter is not None:
        counter.count += int(np.count_nonzero(clipped != e))
    return clipped


# ----------------------------------------------------------------------------
# draw container


@dataclass
class DrawSet:
    """S posterior draws for one parameter block, with per-draw log weights.

    ``aux`` holds per-draw quantities that are not smoothed by the tilting
    engine but travel with each draw (e.g. the residual variance ``sigma2``).
    """

    draws: np.ndarray
    log_weights: np.ndarray
    block: str
    model_spec: Any
    rng_seed: int
    param_names: list[str]
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 2:
            raise DomainError("draws must be an S x k matrix")
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if self.block not in ("alpha", "beta"):
            raise DomainError(f"block must be 'alpha' or 'beta', got {self.block!r}")
        if self.S < 2:
            raise DomainError("a DrawSet needs at least 2 draws")
        if len(self.log_weights) != self.S:
            raise DomainError("log_weights length does not match the number of draws")
        if not np.all(np.isfinite(self.draws)):
            raise DomainError("non-finite posterior draw")
        if not np.all(np.isfinite(self.log_weights)):
            raise DomainError("non-finite log weight")

    @property
    def S(self) -> int:
        return self.draws.shape[0]

    @property
    def k(self) -> int:
        return self.draws.shape[1]

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max()
        w = np.exp(lw)
        return w / w.sum()

    def mean(self) -> np.ndarray:
        return self.weights @ self.draws

    def with_log_weights(self, log_weights: np.ndarray, **diag) -> "DrawSet":
        return replace(self, log_weights=np.asarray(log_weights, dtype=float),
                       aux=dict(self.aux), diagnostics={**self.diagnostics, **diag})

    def to_csv(self, path) -> Path:
        """One draw per row: parameter columns, aux columns, then log_weight."""
        path = Path(path)
        aux_names = sorted(self.aux)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([*self.param_names, *aux_names, "log_weight"])
            for s in range(self.S):
                w.writerow([*(f"{v:.17g}" for v in self.draws[s]),
                            *(f"{self.aux[a][s]:.17g}" for a in aux_names),
                            f"{self.log_weights[s]:.17g}"])
        return path

    @classmethod
    def from_csv(cls, path, block: str, model_spec=None, rng_seed: int = -1,
                 aux_names: tuple[str, ...] = ("sigma2",)) -> "DrawSet":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        lw = body[:, header.index("log_weight")]
        aux = {a: body[:, header.index(a)] for a in aux_names if a in header}
        pcols = [j for j, h in enumerate(header) if h != "log_weight" and h not in aux]
        return cls(draws=body[:, pcols], log_weights=lw, block=block, model_spec=model_spec,
                   rng_seed=rng_seed, param_names=[header[j] for j in pcols], aux=aux)


# ----------------------------------------------------------------------------
# helpers


def _require_valid(d: Dataset) -> None:
    report = validate(d)
    if not report.ok:
        raise PreconditionError("dataset failed validation: " + "; ".join(report.errors))


def _check_rank(X: np.ndarray) -> None:
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError(
            f"design matrix of shape {X.shape} does not have full column rank")


def _inv_gamma(rng: np.random.Generator, shape, rate):
    size = np.broadcast(np.asarray(shape), np.asarray(rate)).shape or None
    return rate / rng.standard_gamma(shape, size=size)


def _logistic_map(X: np.ndarray, y: np.ndarray, prior_prec: np.ndarray,
                  max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, bool]:
    """Penalized logistic MAP by Newton's method. Returns (mode, hessian, converged)."""
    k = X.shape[1]
    beta = np.zeros(k)
    for _ in range(max_iter):
        eta = X @ beta
        p = expit(eta)
        grad = X.T @ (y - p) - prior_prec * beta
        H = (X * (p * (1 - p))[:, None]).T @ X + np.diag(prior_prec)
        step = np.linalg.solve(H, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            p = expit(X @ beta)
            H = (X * (p * (1 - p))[:, None]).T @ X + np.diag(prior_prec)
            return beta, H, True
        if np.max(np.abs(beta)) > 1e3:
            break
    p = expit(X @ beta)
    H = (X * (p * (1 - p))[:, None]).T @ X + np.diag(prior_prec)
    return beta, H, False


def _logistic_logpost(X, y, prior_prec, B):
    """Log posterior of logistic coefficients, vectorized over columns of B (k x C)."""
    eta = X @ B
    ll = y @ log_expit(eta) + (1 - y) @ log_expit(-eta)
    return ll - 0.5 * np.sum(prior_prec[:, None] * B * B, axis=0)


def _rw_metropolis(logpost, init: np.ndarray, chol: np.ndarray, S: int,
                   cfg: SamplerConfig, rng: np.random.Generator):
    """Adaptive random-walk Metropolis over ``cfg.n_chains`` parallel chains.

    The proposal is ``scale * chol @ z``; ``scale`` adapts toward
    ``cfg.target_accept`` during burn-in and is frozen afterwards. Returns the
    S x k draws (chain-major order) and the post-burn-in acceptance rate.
    """
    k = init.shape[0]
    C = max(1, int(cfg.n_chains))
    per_chain = -(-S // C)
    n_keep = per_chain * cfg.thin
    current = init[:, None] + 0.1 * (chol @ rng.standard_normal((k, C)))
    lp = logpost(current)
    log_scale = math.log(2.38 / math.sqrt(k))
    acc_window = 0
    out = np.empty((per_chain, k, C))
    accepted = 0
    for it in range(cfg.burn_in + n_keep):
        prop = current + math.exp(log_scale) * (chol @ rng.standard_normal((k, C)))
        lp_prop = logpost(prop)
        accept = np.log(rng.uniform(size=C)) < lp_prop - lp
        current[:, accept] = prop[:, accept]
        lp[accept] = lp_prop[accept]
        if it < cfg.burn_in:
            acc_window += int(accept.sum())
            if (it + 1) % cfg.adapt_interval == 0:
                rate = acc_window / (cfg.adapt_interval * C)
                log_scale += (rate - cfg.target_accept) * 2.0 / math.sqrt(1 + (it + 1) / cfg.adapt_interval / 10)
                acc_window = 0
        else:
            accepted += int(accept.sum())
            j = it - cfg.burn_in
            if (j + 1) % cfg.thin == 0:
                out[j // cfg.thin] = current
    draws = out.transpose(2, 0, 1).reshape(C * per_chain, k)[:S]
    return draws, accepted / (n_keep * C)


def _acceptance_diagnostics(rate: float) -> dict:
    diag = {"acceptance_rate": rate}
    if not 0.05 <= rate <= 0.8:
        msg = f"Metropolis acceptance rate {rate:.3f} outside [0.05, 0.8] after adaptation"
        diag["warning"] = msg
        warnings.warn(msg, DiagnosticWarning, stacklevel=3)
    return diag


def _prior_precision(n_params: int, prior: PriorSpec) -> np.ndarray:
    return np.full(n_params, 1.0 / prior.gaussian_variance)


# ----------------------------------------------------------------------------
# closed-form posteriors


def conjugate_posterior(d: Dataset, spec: OutcomeModelSpec, a0: float = 0.01, b0: float = 0.01):
    """Normal-inverse-gamma posterior for the gaussian-linear outcome model.

    Prior: flat on the intercept and treatment coefficients, covariate slopes
    N(0, sigma2 * v0) with v0 the prior variance of ``spec.prior``, and
    sigma2 ~ IG(a0, b0). Returns (mean, V, a_n, b_n) where
    beta | sigma2, D ~ N(mean, sigma2 * V) and sigma2 | D ~ IG(a_n, b_n).
    """
    X = spec.matrix(d)
    _check_rank(X)
    y = d.y
    k = X.shape[1]
    n_free = min(spec.n_unpenalized(), k)
    prior_prec = np.r_[np.zeros(n_free), np.full(k - n_free, 1.0 / spec.prior.gaussian_variance)]
    prec = X.T @ X + np.diag(prior_prec)
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, X.T @ y))
    V = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(k)))
    a_n = a0 + (d.n - n_free) / 2
    b_n = b0 + 0.5 * max(float(y @ y - mean @ prec @ mean), 0.0)
    return mean, V, a_n, b_n


def general_bayes_posterior(d: Dataset, spec: OutcomeModelSpec):
    """Gaussian posterior proportional to exp(-omega * sum r_i^2) * N(0, v0 I)."""
    X = spec.matrix(d)
    _check_rank(X)
    omega = spec.learning_rate
    k = X.shape[1]
    prec = 2 * omega * X.T @ X + np.eye(k) / spec.prior.gaussian_variance
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (2 * omega * X.T @ d.y)
    return mean, cov


# ----------------------------------------------------------------------------
# public samplers


def sample_outcome_posterior(d: Dataset, spec: OutcomeModelSpec, S: int = DEFAULT_DRAWS,
                             seed: int = 0, sampler: SamplerConfig | None = None) -> DrawSet:
    """Draw S samples of beta from the outcome posterior."""
    _require_valid(d)
    if spec.prior.kind == "horseshoe":
        return sample_horseshoe_posterior(d, "beta", S, seed, spec=spec, sampler=sampler)
    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(seed)
    names = spec.param_names(d)
    aux: dict[str, np.ndarray] = {}
    diag: dict[str, Any] = {"family": spec.family}

    if spec.family == "gaussian-linear":
        mean, V, a_n, b_n = conjugate_posterior(d, spec)
        sigma2 = _inv_gamma(rng, a_n, b_n * np.ones(S))
        L = np.linalg.cholesky(V)
        z = rng.standard_normal((S, len(mean)))
        draws = mean + np.sqrt(sigma2)[:, None] * (z @ L.T)
        aux["sigma2"] = sigma2
    elif spec.family == "general-bayes-squared-loss":
        mean, cov = general_bayes_posterior(d, spec)
        L = np.linalg.cholesky(cov)
        draws = mean + rng.standard_normal((S, len(mean))) @ L.T
    else:
        X = spec.matrix(d)
        _check_rank(X)
        prior_prec = _prior_precision(X.shape[1], spec.prior)
        mode, H, converged = _logistic_map(X, d.y, prior_prec)
        chol = np.linalg.cholesky(np.linalg.inv(H))
        draws, rate = _rw_metropolis(lambda B: _logistic_logpost(X, d.y, prior_prec, B),
                                     mode, chol, S, sampler, rng)
        diag.update(_acceptance_diagnostics(rate))
        diag["map_converged"] = converged
    return DrawSet(draws=draws, log_weights=np.zeros(S), block="beta", model_spec=spec,
                   rng_seed=seed, param_names=names, aux=aux, diagnostics=diag)


def sample_propensity_posterior(d: Dataset, spec: PropensityModelSpec, S: int = DEFAULT_DRAWS,
                                seed: int = 0, sampler: SamplerConfig | None = None) -> DrawSet:
    """Draw S samples of alpha from the logistic propensity posterior.

    Only the treatment and the covariates are read; the outcome never is.
    """
    _require_valid(d)
    if spec.prior.kind == "horseshoe":
        return sample_horseshoe_posterior(d, "alpha", S, seed, spec=spec, sampler=sampler)
    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(seed)
    X = spec.matrix(d)
    a = d.a
    prior_prec = _prior_precision(X.shape[1], spec.prior)
    mode, H, converged = _logistic_map(X, a, prior_prec)
    chol = np.linalg.cholesky(np.linalg.inv(H))
    draws, rate = _rw_metropolis(lambda B: _logistic_logpost(X, a, prior_prec, B),
                                 mode, chol, S, sampler, rng)
    diag: dict[str, Any] = _acceptance_diagnostics(rate)
    diag["map_converged"] = converged
    if np.max(np.abs(draws)) > 50:
        msg = "propensity draws exceed |alpha| > 50; possible perfect separation"
        diag["separation_warning"] = msg
        warnings.warn(msg, DiagnosticWarning, stacklevel=2)
    return DrawSet(draws=draws, log_weights=np.zeros(S), block="alpha", model_spec=spec,
                   rng_seed=seed, param_names=spec.param_names(d), diagnostics=diag)


def sample_horseshoe_posterior(d: Dataset, block: str, S: int = DEFAULT_DRAWS, seed: int = 0,
                               spec=None, sampler: SamplerConfig | None = None) -> DrawSet:
    """Horseshoe-prior posterior for outcome (gaussian-linear) or propensity coefficients.

    Half-Cauchy local and global scales use the inverse-gamma auxiliary
    representation (lambda_j^2 | nu_j, tau^2 | xi). Intercept and treatment
    coefficients are not shrunk: they get a flat prior in the linear model
    and the gaussian prior in the logistic model. For the
    logistic propensity model the coefficient block is updated by a
    Metropolis step inside each Gibbs sweep.
    """
    _require_valid(d)
    sampler = sampler or SamplerConfig()
    rng = np.random.default_rng(seed)
    if block == "beta":
        spec = spec or OutcomeModelSpec(prior=PriorSpec("horseshoe"))
        if spec.family != "gaussian-linear":
            raise DomainError("horseshoe outcome posteriors support the gaussian-linear family only")
        X = spec.matrix(d)
        _check_rank(X)
        draws, aux, diag = _horseshoe_linear(X, d.y, spec.n_unpenalized(), S, sampler, rng)
    elif block == "alpha":
        spec = spec or PropensityModelSpec(prior=PriorSpec("horseshoe"))
        X = spec.matrix(d)
        draws, aux, diag = _horseshoe_logistic(X, d.a, spec.n_unpenalized(),
                                               spec.prior.gaussian_variance, S, sampler, rng)
    else:
        raise DomainError(f"block must be 'alpha' or 'beta', got {block!r}")
    diag["prior"] = "horseshoe"
    return DrawSet(draws=draws, log_weights=np.zeros(S), block=block, model_spec=spec,
                   rng_seed=seed, param_names=spec.param_names(d), aux=aux, diagnostics=diag)


def _horseshoe_scales(rng, coef2, lam2, nu, tau2, xi, scale2=1.0):
    """One Gibbs pass over (lambda^2, nu, tau^2, xi) given squared coefficients."""
    p = len(coef2)
    lam2 = _inv_gamma(rng, 1.0, 1.0 / nu + coef2 / (2 * tau2 * scale2))
    nu = _inv_gamma(rng, 1.0, 1.0 + 1.0 / lam2)
    tau2 = _inv_gamma(rng, (p + 1) / 2, 1.0 / xi + np.sum(coef2 / lam2) / (2 * scale2))
    xi = _inv_gamma(rng, 1.0, 1.0 + 1.0 / tau2)
    # guard against numerical collapse of the scales
    lam2 = np.clip(lam2, 1e-12, 1e12)
    tau2 = float(np.clip(tau2, 1e-12, 1e12))
    return lam2, nu, tau2, xi


def _horseshoe_linear(X, y, n_free, S, cfg, rng):
    n, k = X.shape
    XtX, Xty = X.T @ X, X.T @ y
    p = k - n_free
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    sigma2 = max(float(np.mean((y - X @ beta) ** 2)), 1e-8)
    lam2, nu, tau2, xi = np.ones(p), np.ones(p), 1.0, 1.0
    draws = np.empty((S, k))
    sig = np.empty(S)
    taus = np.empty(S)
    total = cfg.burn_in + S * cfg.thin
    for it in range(total):
        # unshrunk coefficients flat, shrunk ones N(0, sigma2 * lam2 * tau2)
        dinv = np.concatenate([np.zeros(n_free), 1.0 / (lam2 * tau2)])
        L = np.linalg.cholesky(XtX + np.diag(dinv))
        mu = np.linalg.solve(L.T, np.linalg.solve(L, Xty))
        beta = mu + math.sqrt(sigma2) * np.linalg.solve(L.T, rng.standard_normal(k))
        resid = y - X @ beta
        rate = 0.5 * (resid @ resid + np.sum(dinv * beta * beta))
        sigma2 = float(_inv_gamma(rng, (n + p) / 2, rate))
        if p:
            lam2, nu, tau2, xi = _horseshoe_scales(rng, beta[n_free:] ** 2, lam2, nu, tau2, xi, sigma2)
        j = it - cfg.burn_in
        if j >= 0 and (j + 1) % cfg.thin == 0:
            draws[j // cfg.thin] = beta
            sig[j // cfg.thin] = sigma2
            taus[j // cfg.thin] = tau2
    return draws, {"sigma2": sig, "tau2": taus}, {"sampler": "horseshoe-gibbs"}


def _horseshoe_logistic(X, a, n_free, v0, S, cfg, rng):
    n, k = X.shape
    p = k - n_free
    # Fixed curvature reference for the proposal, from a lightly penalized fit.
    mode, _, _ = _logistic_map(X, a, np.full(k, 1.0 / v0))
    pr = expit(X @ mode)
    XWX = (X * (pr * (1 - pr))[:, None]).T @ X
    alpha = mode.copy()
    lam2, nu, tau2, xi = np.ones(p), np.ones(p), 1.0, 1.0
    log_scale = math.log(2.38 / math.sqrt(k))
    draws = np.empty((S, k))
    taus = np.empty(S)
    acc_window = accepted = 0
    total = cfg.burn_in + S * cfg.thin
    for it in range(total):
        prec = np.concatenate([np.full(n_free, 1.0 / v0), 1.0 / (lam2 * tau2)])
        L = np.linalg.cholesky(XWX + np.diag(prec))
        prop = alpha + math.exp(log_scale) * np.linalg.solve(L.T, rng.standard_normal(k))
        lp_cur = _logistic_logpost(X, a, prec, alpha[:, None])[0]
        lp_new = _logistic_logpost(X, a, prec, prop[:, None])[0]
        ok = math.log(rng.uniform()) < lp_new - lp_cur
        if ok:
            alpha = prop
        if p:
            lam2, nu, tau2, xi = _horseshoe_scales(rng, alpha[n_free:] ** 2, lam2, nu, tau2, xi)
        if it < cfg.burn_in:
            acc_window += ok
            if (it + 1) % cfg.adapt_interval == 0:
                rate = acc_window / cfg.adapt_interval
                log_scale += (rate - cfg.target_accept) * 2.0 / math.sqrt(1 + (it + 1) / cfg.adapt_interval / 10)
                acc_window = 0
        else:
            accepted += ok
            j = it - cfg.burn_in
            if (j + 1) % cfg.thin == 0:
                draws[j // cfg.thin] = alpha
                taus[j // cfg.thin] = tau2
    diag = {"sampler": "horseshoe-metropolis-within-gibbs"}
    diag.update(_acceptance_diagnostics(accepted / (S * cfg.thin)))
    return draws, {"tau2": taus}, diag
