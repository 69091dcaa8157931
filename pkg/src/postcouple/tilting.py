"""Entropic tilting of the joint (alpha, beta) posterior.

The tilted posterior reweights draws by exp(lambda * B) where B is the moment
evaluated at each draw; lambda is chosen so the tilted mean of B is zero.
Two solvers are provided: importance reweighting of the original draws with a
Newton iteration on lambda, and a sequential Monte Carlo sampler that walks a
linear lambda grid with reweight / resample / kernel-smoothing steps.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.optimize import brentq

from .data import Dataset
from .errors import (DiagnosticWarning, DomainError, InfeasibleConstraintError,
                     NonConvergenceError, NumericalError, PreconditionError,
                     PruneRefusalError)
from .moments import MomentEvaluator, MomentSpec
from .posteriors import DrawSet

MIN_PRUNED_PARTICLES = 50


@dataclass(frozen=True)
class TiltConfig:
    method: str = "smc"
    tol_abs: float = 1e-8
    tol_rel: float = 1e-4
    max_iter: int = 100
    smoothing: float = 0.99
    lambda_bar: float = 50.0
    T: int = 200
    prune_keep_fraction: float = 1.0
    seed: int = 0
    # beta coordinates copied unchanged through smoothing (confounder selection)
    frozen_beta: tuple[int, ...] = ()

    def __post_init__(self):
        if self.method not in ("importance", "smc"):
            raise DomainError(f"unknown tilting method {self.method!r}")
        if not (self.tol_abs > 0 and self.tol_rel >= 0):
            raise DomainError("tolerances must be positive")
        if self.max_iter < 1 or self.T < 1:
            raise DomainError("max_iter and T must be at least 1")
        if not 0 < self.smoothing <= 1:
            raise DomainError("smoothing coefficient must lie in (0, 1]")
        if not self.lambda_bar > 0:
            raise DomainError("lambda_bar must be positive")
        if not 0 < self.prune_keep_fraction <= 1:
            raise DomainError("prune_keep_fraction must lie in (0, 1]")

    def tolerance(self, moments: np.ndarray, weights: np.ndarray | None = None) -> float:
        if weights is None:
            sd = float(np.std(moments))
        else:
            mu = weights @ moments
            sd = math.sqrt(max(float(weights @ (moments - mu) ** 2), 0.0))
        return self.tol_abs + self.tol_rel * sd


@dataclass
class ParticleSystem:
    alpha_particles: np.ndarray
    beta_particles: np.ndarray
    weights: np.ndarray
    lam: float
    moment_values: np.ndarray
    ess: float
    history: list[dict] = field(default_factory=list)
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def S(self) -> int:
        return len(self.weights)

    @property
    def mean_moment(self) -> float:
        return float(self.weights @ self.moment_values)

    def check_invariants(self) -> None:
        w = self.weights
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise NumericalError("particle weights are not a simplex vector")
        if not np.all(np.isfinite(self.moment_values)):
            raise NumericalError("non-finite moment value")
        if abs(self.ess - effective_sample_size(w)) > 1e-9 * max(1.0, self.ess):
            raise NumericalError("stored ESS disagrees with the weights")


def effective_sample_size(weights) -> float:
    """1 / sum(w^2) for normalized weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def _normalize(log_w: np.ndarray) -> np.ndarray:
    z = log_w - np.max(log_w)
    w = np.exp(z)
    return w / w.sum()


def lambda_schedule(initial_moment_mean: float, lambda_bar: float, T: int) -> np.ndarray:
    """Linear lambda grid 0, lambda_bar/T, ..., lambda_bar, signed against the initial mean."""
    if T < 1 or not lambda_bar > 0:
        raise DomainError("need T >= 1 and lambda_bar > 0")
    if initial_moment_mean == 0:
        return np.zeros(1)
    sign = 1.0 if initial_moment_mean < 0 else -1.0
    return sign * np.arange(T + 1) * lambda_bar / T


def export_history_csv(ps: ParticleSystem, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "lambda", "mean_moment", "ess", "event"])
        for rec in ps.history:
            w.writerow([rec["t"], f"{rec['lambda']:.17g}", f"{rec['mean_moment']:.17g}",
                        f"{rec['ess']:.17g}", rec.get("event", "")])
    return path


# ----------------------------------------------------------------------------
# root finding for lambda


def _tilted_mean(B: np.ndarray, log_w0: np.ndarray, lam: float) -> float:
    return float(_normalize(log_w0 + lam * B) @ B)


def _bisect_lambda(B, log_w0, lambda_bar):
    lo, hi = -lambda_bar, lambda_bar
    f = lambda lam: _tilted_mean(B, log_w0, lam)
    while f(lo) > 0 or f(hi) < 0:
        lo, hi = 2 * lo, 2 * hi
        if hi > 1e12:
            raise NonConvergenceError("no sign change of the tilted moment found", last_lambda=hi,
                                      residual=f(hi))
    return brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def _solve_root(B: np.ndarray, log_w0: np.ndarray, cfg: TiltConfig, t0: int = 0,
                event: str = "newton") -> tuple[float, list[dict]]:
    """Newton iteration lambda <- lambda - sum(w B) / sum(w B^2) from lambda = 0.

    Falls back to bracketing when |lambda| leaves [-10 lambda_bar, 10 lambda_bar].
    """
    live = np.isfinite(log_w0)
    Bl, lw = B[live], log_w0[live]
    w = _normalize(lw)
    mean0 = float(w @ Bl)
    history = []
    if abs(mean0) <= cfg.tol_abs:
        return 0.0, history
    if not (Bl.min() < 0 < Bl.max()):
        raise InfeasibleConstraintError(
            "all moment values share one sign; no tilting parameter zeroes their weighted mean")
    lam = 0.0
    for it in range(1, cfg.max_iter + 1):
        z = lw + lam * Bl
        w = np.exp(z - z.max())
        step = float((w @ Bl) / (w @ (Bl * Bl)))
        lam -= step
        if not math.isfinite(lam) or abs(lam) > 10 * cfg.lambda_bar:
            lam = _bisect_lambda(Bl, lw, cfg.lambda_bar)
            wn = _normalize(lw + lam * Bl)
            history.append({"t": t0 + it, "lambda": lam, "mean_moment": float(wn @ Bl),
                            "ess": effective_sample_size(wn), "event": "bisection"})
            return lam, history
        wn = w / w.sum()
        history.append({"t": t0 + it, "lambda": lam, "mean_moment": _tilted_mean(Bl, lw, lam),
                        "ess": effective_sample_size(wn), "event": event})
        if abs(history[-1]["mean_moment"]) <= cfg.tol_abs or abs(step) <= 1e-14 * max(1.0, abs(lam)):
            return lam, history
    resid = _tilted_mean(Bl, lw, lam)
    wn = _normalize(lw + lam * Bl)
    if abs(resid) <= cfg.tolerance(Bl, wn):
        return lam, history
    raise NonConvergenceError(f"Newton iteration did not converge in {cfg.max_iter} steps",
                              last_lambda=lam, residual=resid, history=history)


def tilt_moment_values(B, log_w0=None, cfg: TiltConfig | None = None) -> tuple[float, np.ndarray]:
    """Solve for lambda directly on precomputed moment values.

    Returns (lambda, tilted normalized weights). ``log_w0`` defaults to uniform.
    """
    B = np.asarray(B, dtype=float)
    cfg = cfg or TiltConfig(method="importance")
    log_w0 = np.zeros(len(B)) if log_w0 is None else np.asarray(log_w0, dtype=float)
    lam, _ = _solve_root(B, log_w0, cfg)
    return lam, _normalize(log_w0 + lam * B)


# ----------------------------------------------------------------------------
# solvers


def _setup(alpha_draws: DrawSet, beta_draws: DrawSet, moment: MomentSpec | None, d: Dataset,
           ps_spec, outcome_spec):
    if alpha_draws.S != beta_draws.S:
        raise PreconditionError(f"draw counts differ: alpha {alpha_draws.S}, beta {beta_draws.S}")
    ps_spec = ps_spec if ps_spec is not None else alpha_draws.model_spec
    outcome_spec = outcome_spec if outcome_spec is not None else beta_draws.model_spec
    evaluator = MomentEvaluator(d, ps_spec, outcome_spec, moment)
    log_w0 = alpha_draws.log_weights + beta_draws.log_weights
    return evaluator, log_w0


def _warn_degenerate(ess: float, S: int, diag: dict) -> None:
    if ess < 0.01 * S:
        msg = f"tilted weights are degenerate (ESS {ess:.1f} of {S}); consider the SMC solver"
        diag["degenerate_weights_warning"] = msg
        warnings.warn(msg, DiagnosticWarning, stacklevel=3)


def solve_lambda_is(alpha_draws: DrawSet, beta_draws: DrawSet, moment: MomentSpec | None,
                    d: Dataset, cfg: TiltConfig, ps_spec=None, outcome_spec=None) -> ParticleSystem:
    """Tilt by importance reweighting of the original draws."""
    evaluator, log_w0 = _setup(alpha_draws, beta_draws, moment, d, ps_spec, outcome_spec)
    offset = beta_draws.aux.get("xi_shift")
    B = evaluator(alpha_draws.draws, beta_draws.draws, offset)
    w0 = _normalize(log_w0)
    history = [{"t": 0, "lambda": 0.0, "mean_moment": float(w0 @ B),
                "ess": effective_sample_size(w0), "event": "start"}]
    lam, steps = _solve_root(B, log_w0, cfg)
    history += steps
    w = _normalize(log_w0 + lam * B)
    resid = float(w @ B)
    if abs(resid) > cfg.tolerance(B, w):
        raise NonConvergenceError("tilted moment did not reach tolerance", last_lambda=lam,
                                  residual=resid, history=history)
    ps = ParticleSystem(alpha_particles=alpha_draws.draws, beta_particles=beta_draws.draws,
                        weights=w, lam=lam, moment_values=B, ess=effective_sample_size(w),
                        history=history, aux=dict(beta_draws.aux),
                        diagnostics={"method": "importance", "clipped": evaluator.clip_counter.count})
    _warn_degenerate(ps.ess, ps.S, ps.diagnostics)
    return ps


def _smoothing_chol(cov: np.ndarray) -> np.ndarray:
    k = cov.shape[0]
    scale = max(float(np.trace(cov)) / max(k, 1), 1e-300)
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            return np.linalg.cholesky(cov + jitter * scale * np.eye(k))
        except np.linalg.LinAlgError:
            continue
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-8 * max(abs(vals.max()), 1e-300):
        raise NumericalError("particle covariance is not positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0, None))


def smooth_particles(resampled: np.ndarray, prev_mean: np.ndarray, prev_cov: np.ndarray,
                     a: float, rng: np.random.Generator, free: np.ndarray | None = None) -> np.ndarray:
    """Kernel smoothing a * theta + (1 - a) * mean + N(0, (1 - a^2) cov).

    Coordinates outside ``free`` (a boolean mask) are copied unchanged.
    """
    out = resampled.copy()
    if free is None:
        free = np.ones(resampled.shape[1], dtype=bool)
    if not free.any():
        return out
    sub_cov = prev_cov[np.ix_(free, free)]
    S = resampled.shape[0]
    noise_scale = math.sqrt(max(1.0 - a * a, 0.0))
    moved = a * resampled[:, free] + (1 - a) * prev_mean[free]
    if noise_scale > 0:
        L = _smoothing_chol(sub_cov)
        moved = moved + noise_scale * (rng.standard_normal((S, L.shape[1])) @ L.T)
    out[:, free] = moved
    return out


def _multinomial_indices(rng: np.random.Generator, w: np.ndarray, S: int) -> np.ndarray:
    counts = rng.multinomial(S, w)
    return np.repeat(np.arange(len(w)), counts)


def _prune_mask(log_w: np.ndarray, keep_fraction: float) -> np.ndarray:
    S = len(log_w)
    n_keep = math.ceil(keep_fraction * S)
    if n_keep >= S:
        return np.ones(S, dtype=bool)
    if n_keep < MIN_PRUNED_PARTICLES:
        raise PruneRefusalError(f"pruning would keep only {n_keep} particles")
    order = np.argsort(-log_w, kind="stable")
    keep = np.zeros(S, dtype=bool)
    keep[order[:n_keep]] = True
    return keep


def solve_lambda_smc(alpha_draws: DrawSet, beta_draws: DrawSet, moment: MomentSpec | None,
                     d: Dataset, cfg: TiltConfig, ps_spec=None, outcome_spec=None) -> ParticleSystem:
    """Tilt by sequential Monte Carlo along a linear lambda grid.

    Each step reweights by exp((lambda_t - lambda_{t-1}) B), optionally prunes
    the lowest-weight particles, resamples multinomially and applies kernel
    smoothing. When the tilted mean of B would change sign inside a grid step,
    that step's increment is solved exactly on the current particles; after
    the final smoothing, a last reweighting (one Newton solve on the equally
    weighted particles) removes the residual smoothing noise from the
    constraint, so the returned weights satisfy it to tolerance.
    """
    evaluator, log_w0 = _setup(alpha_draws, beta_draws, moment, d, ps_spec, outcome_spec)
    S = alpha_draws.S
    if S < 100:
        raise PreconditionError(f"the SMC solver needs at least 100 particles, got {S}")
    rng = np.random.default_rng(cfg.seed)
    ka = alpha_draws.k
    theta = np.hstack([alpha_draws.draws, beta_draws.draws])
    free = np.ones(theta.shape[1], dtype=bool)
    for j in cfg.frozen_beta:
        free[ka + j] = False
    aux = {k: np.asarray(v) for k, v in beta_draws.aux.items()}

    def moments_of(th, aux_):
        return evaluator(th[:, :ka], th[:, ka:], aux_.get("xi_shift"))

    B = moments_of(theta, aux)
    w = _normalize(log_w0)
    mean_b = float(w @ B)
    history = [{"t": 0, "lambda": 0.0, "mean_moment": mean_b,
                "ess": effective_sample_size(w), "event": "start"}]
    diag: dict[str, Any] = {"method": "smc", "prune_keep_fraction": cfg.prune_keep_fraction}

    def finish(th, aux_, B_, weights, lam):
        ps = ParticleSystem(alpha_particles=th[:, :ka], beta_particles=th[:, ka:], weights=weights,
                            lam=float(lam), moment_values=B_, ess=effective_sample_size(weights),
                            history=history, aux=aux_, diagnostics=diag)
        diag["clipped"] = evaluator.clip_counter.count
        diag["steps"] = sum(1 for h in history if h["event"] in ("smc", "smc-final"))
        return ps

    if abs(mean_b) <= cfg.tolerance(B, w):
        return finish(theta, aux, B, w, 0.0)

    schedule = lambda_schedule(mean_b, cfg.lambda_bar, cfg.T)
    direction = math.copysign(1.0, schedule[-1])
    initial_sign = math.copysign(1.0, mean_b)
    log_w = np.log(w)
    lam_prev = 0.0
    for t in range(1, len(schedule)):
        step_lw = log_w + (schedule[t] - lam_prev) * B
        keep = np.ones(S, dtype=bool)
        if cfg.prune_keep_fraction < 1:
            # ranking by exp(lambda B) is ranking by direction * B
            keep = _prune_mask(direction * B, cfg.prune_keep_fraction)
            step_lw = np.where(keep, step_lw, -np.inf)
        trial = _normalize(step_lw)
        trial_mean = float(trial @ B)
        final = trial_mean * mean_b <= 0 or abs(trial_mean) <= cfg.tolerance(B, trial)
        lam_t = schedule[t]
        if final:
            base_lw = np.where(keep, log_w, -np.inf)
            delta, _ = _solve_root(B, base_lw, cfg, t0=t, event="smc-root")
            lam_t = lam_prev + delta
            trial = _normalize(base_lw + delta * B)
        if cfg.prune_keep_fraction < 1:
            history.append({"t": t, "lambda": lam_t, "mean_moment": trial_mean,
                            "ess": effective_sample_size(trial), "event": "prune",
                            "kept": int(keep.sum())})
        step_ess = effective_sample_size(trial)

        # smoothing moments of the particles before this step
        prev_mean = w @ theta
        centered = theta - prev_mean
        prev_cov = (centered * w[:, None]).T @ centered
        idx = _multinomial_indices(rng, trial, S)
        theta = smooth_particles(theta[idx], prev_mean, prev_cov, cfg.smoothing, rng, free)
        aux = {k: v[idx] for k, v in aux.items()}
        B = moments_of(theta, aux)
        w = np.full(S, 1.0 / S)
        log_w = np.log(w)
        mean_b = float(B.mean())
        lam_prev = lam_t
        history.append({"t": t, "lambda": lam_t, "mean_moment": mean_b, "ess": step_ess,
                        "event": "smc-final" if final else "smc"})
        if abs(mean_b) <= cfg.tolerance(B):
            return finish(theta, aux, B, w, lam_t)
        # smoothing noise can carry the mean across zero before the grid does
        if final or mean_b * initial_sign < 0:
            delta, steps = _solve_root(B, log_w, cfg, t0=t, event="polish")
            history.extend(steps)
            w = _normalize(log_w + delta * B)
            if abs(w @ B) > cfg.tolerance(B, w):
                raise NonConvergenceError("final reweighting missed the tolerance",
                                          last_lambda=lam_t + delta, residual=float(w @ B),
                                          history=history)
            ps = finish(theta, aux, B, w, lam_t + delta)
            _warn_degenerate(ps.ess, S, diag)
            return ps
    raise NonConvergenceError(
        f"lambda schedule exhausted after {cfg.T} steps (|mean moment| = {abs(mean_b):.3g})",
        last_lambda=lam_prev, residual=mean_b, history=history)


def solve_lambda(alpha_draws: DrawSet, beta_draws: DrawSet, moment: MomentSpec | None,
                 d: Dataset, cfg: TiltConfig, ps_spec=None, outcome_spec=None) -> ParticleSystem:
    solver = solve_lambda_smc if cfg.method == "smc" else solve_lambda_is
    return solver(alpha_draws, beta_draws, moment, d, cfg, ps_spec, outcome_spec)


def prune_particles(ps: ParticleSystem, keep_fraction: float,
                    min_keep: int = MIN_PRUNED_PARTICLES) -> ParticleSystem:
    """Keep the ceil(keep_fraction * S) largest-weight particles and renormalize."""
    if not 0 < keep_fraction <= 1:
        raise DomainError("keep_fraction must lie in (0, 1]")
    S = ps.S
    n_keep = math.ceil(keep_fraction * S)
    if n_keep >= S:
        return ps
    if n_keep < min_keep:
        raise PruneRefusalError(f"pruning would keep only {n_keep} particles (minimum {min_keep})")
    order = np.argsort(-ps.weights, kind="stable")[:n_keep]
    order.sort()
    w = ps.weights[order] / ps.weights[order].sum()
    history = ps.history + [{"t": (ps.history[-1]["t"] if ps.history else 0), "lambda": ps.lam,
                             "mean_moment": float(w @ ps.moment_values[order]),
                             "ess": effective_sample_size(w), "event": "prune", "kept": n_keep}]
    return replace(ps, alpha_particles=ps.alpha_particles[order],
                   beta_particles=ps.beta_particles[order], weights=w,
                   moment_values=ps.moment_values[order], ess=effective_sample_size(w),
                   history=history, aux={k: v[order] for k, v in ps.aux.items()},
                   diagnostics=dict(ps.diagnostics))
