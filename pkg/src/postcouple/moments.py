"""Scalar doubly-robust moment functions used as tilting constraints.

Three kinds are supported:

``dr``
    mean of (A - e) / (e (1 - e)) * (Y - m_A), with e = e(X; alpha).
``selected``
    the same, but the propensity uses only a selected subset of covariates
    while the outcome mean uses the full beta.
``subclass``
    the propensity weight is replaced by the treated share of the
    equal-frequency propensity stratum each unit falls in.

All evaluation goes through :class:`MomentEvaluator`, which works on batches
of particles (one row per draw) and chunks over particles to bound memory.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import DomainError, PreconditionError, StratumDegeneracyError
from .posteriors import ClipCounter, OutcomeModelSpec, PropensityModelSpec, clip_scores

_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class MomentSpec:
    kind: str = "dr"
    selected_indices: tuple[int, ...] | None = None
    n_strata: int | None = None

    def __post_init__(self):
        if self.kind not in ("dr", "selected", "subclass"):
            raise DomainError(f"unknown moment kind {self.kind!r}")
        if self.kind == "selected":
            if not self.selected_indices:
                raise DomainError("a selected moment needs a nonempty index set")
            object.__setattr__(self, "selected_indices", tuple(int(j) for j in self.selected_indices))
        if self.kind == "subclass":
            if self.n_strata is None or self.n_strata < 2:
                raise PreconditionError("subclassification needs at least 2 strata")


def selected_propensity_spec(ps_spec: PropensityModelSpec, d: Dataset,
                             indices: Sequence[int]) -> PropensityModelSpec:
    """Propensity spec restricted to the covariates at ``indices`` (0-based)."""
    _, names = ps_spec.design.covariates(d)
    if not indices:
        raise DomainError("empty covariate selection")
    if max(indices) >= len(names) or min(indices) < 0:
        raise DomainError(f"selected index out of range for {len(names)} covariates")
    cols = tuple(names[j] for j in sorted(indices))
    return replace(ps_spec, design=ps_spec.design.restricted(cols))


class MomentEvaluator:
    """Evaluate a moment for many (alpha, beta) particles on one dataset.

    ``treated_offset`` (one value per particle) shifts the linear predictor of
    treated units, as used by the sensitivity model m_A + A * xi.
    """

    def __init__(self, d: Dataset, ps_spec: PropensityModelSpec,
                 outcome_spec: OutcomeModelSpec, moment: MomentSpec | None = None,
                 clip_counter: ClipCounter | None = None):
        self.moment = moment or MomentSpec()
        if self.moment.kind == "selected":
            ps_spec = selected_propensity_spec(ps_spec, d, self.moment.selected_indices)
        self.d = d
        self.ps_spec = ps_spec
        self.outcome_spec = outcome_spec
        self.Xp = ps_spec.matrix(d)
        self.Xo = outcome_spec.matrix(d)
        self.y = d.y
        self.a = d.a
        self.clip_counter = clip_counter if clip_counter is not None else ClipCounter()
        self.k_alpha = self.Xp.shape[1]
        self.k_beta = self.Xo.shape[1]

    def _check(self, alpha: np.ndarray, beta: np.ndarray):
        alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        if alpha.shape[1] != self.k_alpha:
            raise DomainError(f"alpha has {alpha.shape[1]} coordinates, model expects {self.k_alpha}")
        if beta.shape[1] != self.k_beta:
            raise DomainError(f"beta has {beta.shape[1]} coordinates, model expects {self.k_beta}")
        if alpha.shape[0] != beta.shape[0]:
            raise DomainError("alpha and beta particle counts differ")
        return alpha, beta

    def residuals(self, beta: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
        """n x S matrix of Y_i - m_{A_i}(X_i; beta_s)."""
        eta = self.Xo @ beta.T
        if offset is not None:
            eta = eta + self.a[:, None] * offset[None, :]
        return self.y[:, None] - self.outcome_spec.mean(eta)

    def scores(self, alpha: np.ndarray) -> np.ndarray:
        """n x S clipped propensity scores."""
        return clip_scores(expit(self.Xp @ alpha.T), self.clip_counter)

    def _ipw_factor(self, e: np.ndarray) -> np.ndarray:
        treated = self.a[:, None] == 1
        return np.where(treated, 1.0 / e, -1.0 / (1.0 - e))

    def _subclass_factor(self, e: np.ndarray) -> np.ndarray:
        n, S = e.shape
        K = self.moment.n_strata
        if K > n:
            raise PreconditionError(f"{K} strata requested for {n} units")
        # stable sort: ties keep original row order
        order = np.argsort(e, axis=0, kind="stable")
        stratum = np.empty((n, S), dtype=np.int64)
        rank_stratum = (np.arange(n) * K) // n
        np.put_along_axis(stratum, order, np.broadcast_to(rank_stratum[:, None], (n, S)), axis=0)
        flat = stratum + K * np.arange(S)[None, :]
        n_all = np.bincount(flat.ravel(), minlength=K * S).reshape(S, K)
        n_treated = np.bincount(flat.ravel(), weights=np.repeat(self.a, S),
                                minlength=K * S).reshape(S, K)
        share = n_treated / n_all
        bad = (n_treated == 0) | (n_treated == n_all)
        if bad.any():
            k = int(np.argwhere(bad)[0][1])
            raise StratumDegeneracyError(
                f"propensity stratum {k + 1} of {K} has no treated or no control units", stratum=k + 1)
        share_i = np.take_along_axis(share.T, stratum, axis=0)
        treated = self.a[:, None] == 1
        return np.where(treated, 1.0 / share_i, -1.0 / (1.0 - share_i))

    def __call__(self, alpha: np.ndarray, beta: np.ndarray,
                 offset: np.ndarray | None = None) -> np.ndarray:
        alpha, beta = self._check(alpha, beta)
        S = alpha.shape[0]
        n = self.d.n
        out = np.empty(S)
        step = max(1, _CHUNK_CELLS // max(n, 1))
        linear = self.outcome_spec.family != "bernoulli-logistic"
        for lo in range(0, S, step):
            hi = min(S, lo + step)
            e = self.scores(alpha[lo:hi])
            if self.moment.kind == "subclass":
                w = self._subclass_factor(e)
            else:
                w = self._ipw_factor(e)
            off = None if offset is None else np.asarray(offset, dtype=float)[lo:hi]
            if linear:
                # sum_i w_i (y_i - x_i' beta) without forming the residual matrix
                val = self.y @ w - np.einsum("sk,sk->s", w.T @ self.Xo, beta[lo:hi])
                if off is not None:
                    val -= off * (self.a @ w)
            else:
                val = np.einsum("is,is->s", w, self.residuals(beta[lo:hi], off))
            out[lo:hi] = val / n
        return out


def _single(evaluator: MomentEvaluator, alpha, beta) -> float:
    return float(evaluator(np.asarray(alpha, dtype=float)[None, :],
                           np.asarray(beta, dtype=float)[None, :])[0])


def dr_moment(d: Dataset, alpha, beta, ps_spec: PropensityModelSpec,
              outcome_spec: OutcomeModelSpec) -> float:
    """DR moment for one (alpha, beta) pair."""
    return _single(MomentEvaluator(d, ps_spec, outcome_spec), alpha, beta)


def selected_moment(d: Dataset, alpha_s, beta, indices: Sequence[int],
                    ps_spec: PropensityModelSpec, outcome_spec: OutcomeModelSpec) -> float:
    """DR moment with the propensity restricted to covariates ``indices``.

    ``alpha_s`` holds the intercept (if the design has one) followed by the
    coefficients of the selected covariates in index order.
    """
    moment = MomentSpec("selected", selected_indices=tuple(indices))
    return _single(MomentEvaluator(d, ps_spec, outcome_spec, moment), alpha_s, beta)


def subclass_moment(d: Dataset, alpha, beta, n_strata: int, ps_spec: PropensityModelSpec,
                    outcome_spec: OutcomeModelSpec) -> float:
    """Subclassification moment with ``n_strata`` equal-frequency propensity strata."""
    moment = MomentSpec("subclass", n_strata=n_strata)
    return _single(MomentEvaluator(d, ps_spec, outcome_spec, moment), alpha, beta)


def moment_from_values(a, e, y, m, clip: bool = True) -> float:
    """DR moment from raw per-unit arrays (treatment, score, outcome, fitted mean)."""
    a, e, y, m = (np.asarray(v, dtype=float).reshape(-1) for v in (a, e, y, m))
    if not len(a) == len(e) == len(y) == len(m):
        raise DomainError("a, e, y and m must have the same length")
    if clip:
        e = clip_scores(e)
    return float(np.mean((a - e) / (e * (1 - e)) * (y - m)))
