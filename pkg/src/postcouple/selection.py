"""Confounder selection with horseshoe posteriors and a coupled re-tilt.

Step 1 draws horseshoe posteriors for both blocks on standardized
covariates and keeps the covariates whose propensity coefficient has
posterior mean at least ``threshold`` in magnitude. Step 2 re-samples the
propensity posterior on the selected covariates and tilts with the selected
moment; the outcome coefficients of unselected covariates are never moved
by the smoothing kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, standardize_covariates
from .errors import DomainError, PreconditionError, SelectionEmptyError
from .estimators import ATESummary, ate_draws, summarize
from .moments import MomentSpec, selected_propensity_spec
from .pipeline import derive_seeds
from .posteriors import (DEFAULT_DRAWS, DrawSet, OutcomeModelSpec, PriorSpec,
                         PropensityModelSpec, SamplerConfig, sample_horseshoe_posterior)
from .tilting import ParticleSystem, TiltConfig, solve_lambda_smc


@dataclass(frozen=True)
class SelectionConfig:
    threshold: float = 0.01
    tilt_cfg: TiltConfig = field(default_factory=TiltConfig)

    def __post_init__(self):
        if not self.threshold > 0:
            raise DomainError("selection threshold must be positive")


def select_confounders(alpha_draws: DrawSet | np.ndarray, threshold: float,
                       n_unpenalized: int | None = None) -> tuple[int, ...]:
    """Covariates j (0-based, intercept excluded) with |posterior mean of alpha_j| >= threshold.

    ``alpha_draws`` may be a DrawSet, whose spec tells whether column 0 is an
    intercept, or a plain vector of covariate posterior means.
    """
    if not threshold > 0:
        raise DomainError("selection threshold must be positive")
    if isinstance(alpha_draws, DrawSet):
        means = alpha_draws.mean()
        if n_unpenalized is None:
            spec = alpha_draws.model_spec
            n_unpenalized = spec.n_unpenalized() if spec is not None else 1
    else:
        means = np.asarray(alpha_draws, dtype=float).reshape(-1)
        n_unpenalized = n_unpenalized or 0
    coef = means[n_unpenalized:]
    if coef.size == 0:
        raise PreconditionError("no covariate coefficients to select from")
    chosen = tuple(int(j) for j in np.flatnonzero(np.abs(coef) >= threshold))
    if not chosen:
        raise SelectionEmptyError(
            f"no covariate has |posterior mean| >= {threshold}; try a lower threshold")
    return chosen


@dataclass
class SelectionResult:
    summary: ATESummary
    threshold: float
    selected: list[str]
    dropped: list[str]
    particles: ParticleSystem
    alpha_means: dict[str, float]

    def report(self) -> dict:
        return {"threshold": self.threshold, "selected": self.selected, "dropped": self.dropped,
                "ate": self.summary.to_dict(method="coupled-selection")}

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2)


def _horseshoe(spec):
    return replace(spec, prior=PriorSpec("horseshoe", spec.prior.gaussian_variance))


def coupled_selection_result(d: Dataset, outcome_spec: OutcomeModelSpec | None = None,
                             ps_spec: PropensityModelSpec | None = None,
                             cfg: SelectionConfig | None = None, S_draws: int = DEFAULT_DRAWS,
                             seed: int = 0, sampler: SamplerConfig | None = None,
                             force_selected: Sequence[int] | None = None,
                             level: float = 0.95) -> SelectionResult:
    """Full confounder-selection run; see :func:`coupled_selection`.

    ``force_selected`` overrides the thresholded set (test hook).
    """
    cfg = cfg or SelectionConfig()
    outcome_spec = _horseshoe(outcome_spec or OutcomeModelSpec())
    ps_spec = _horseshoe(ps_spec or PropensityModelSpec())
    if outcome_spec.design.transform or ps_spec.design.transform:
        raise DomainError("confounder selection works on raw covariate designs")
    d = standardize_covariates(d)
    s_alpha, s_beta, s_alpha2, s_tilt = derive_seeds(seed, 4)

    alpha0 = sample_horseshoe_posterior(d, "alpha", S_draws, s_alpha, spec=ps_spec, sampler=sampler)
    beta = sample_horseshoe_posterior(d, "beta", S_draws, s_beta, spec=outcome_spec, sampler=sampler)
    _, ps_names = ps_spec.design.covariates(d)
    if force_selected is not None:
        chosen = tuple(sorted(int(j) for j in force_selected))
        if not chosen:
            raise SelectionEmptyError("forced selection is empty")
    else:
        chosen = select_confounders(alpha0, cfg.threshold, ps_spec.n_unpenalized())
    selected = [ps_names[j] for j in chosen]
    dropped = [c for c in ps_names if c not in selected]

    ps_sel = selected_propensity_spec(ps_spec, d, chosen)
    alpha = sample_horseshoe_posterior(d, "alpha", S_draws, s_alpha2, spec=ps_sel, sampler=sampler)

    beta_names = outcome_spec.param_names(d)
    frozen = tuple(i for i, name in enumerate(beta_names)
                   if i >= outcome_spec.n_unpenalized() and name not in selected)
    tilt = replace(cfg.tilt_cfg, method="smc", frozen_beta=frozen, seed=s_tilt)
    moment = MomentSpec("selected", selected_indices=chosen)
    ps = solve_lambda_smc(alpha, beta, moment, d, tilt, ps_spec, outcome_spec)
    summary = summarize(ate_draws(ps, d, outcome_spec), level)
    summary.extra.update({"lambda": ps.lam, "n_selected": len(selected)})
    means = alpha0.mean()[ps_spec.n_unpenalized():]
    return SelectionResult(summary=summary, threshold=cfg.threshold, selected=selected,
                           dropped=dropped, particles=ps,
                           alpha_means={c: float(m) for c, m in zip(ps_names, means)})


def coupled_selection(d: Dataset, outcome_spec: OutcomeModelSpec | None = None,
                      ps_spec: PropensityModelSpec | None = None,
                      cfg: SelectionConfig | None = None, S_draws: int = DEFAULT_DRAWS,
                      seed: int = 0, sampler: SamplerConfig | None = None) -> ATESummary:
    """Horseshoe fits, thresholding on propensity means, then the selected-moment tilt.

    Covariates are standardized first so the threshold is scale free.
    Returns the ATE summary of the tilted (full) beta draws.
    """
    res = coupled_selection_result(d, outcome_spec, ps_spec, cfg, S_draws, seed, sampler)
    res.summary.extra.update({"selected": res.selected, "dropped": res.dropped})
    return res.summary
