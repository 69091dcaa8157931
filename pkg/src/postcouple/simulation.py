"""Benchmark data generators, replication harness and ABias/ESE/RMSE/CP/AvL metrics."""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Dataset, Design, TruthInfo
from .errors import ConfigError, DomainError, PostCoupleError, PreconditionError, TooManyFailuresError
from .estimators import ate_draws, frequentist_dr_fit, saarela_bootstrap_dr, summarize
from .pipeline import derive_seeds, sample_posteriors, tilt_and_summarize
from .posteriors import OutcomeModelSpec, PropensityModelSpec, SamplerConfig
from .tilting import TiltConfig

METHODS = ("proposed", "proposed-pruned", "g-formula", "freq-dr", "saarela")
STYLES = ("drop-to-X1", "kang-schafer")
TRUE_ATE = 110.0
BASE_NAMES = ("X1", "X2", "X3", "X4")
PS_COEF = np.array([1.0, -0.5, 0.25, 0.1])
OUTCOME_COEF = 13.7 * np.array([2.0, 1.0, 1.0, 1.0])


# ----------------------------------------------------------------------------
# generators


def generate_kang_schafer(n: int, seed: int) -> Dataset:
    """Four standard-normal covariates, logistic treatment, linear outcomes with ATE 110."""
    if n < 2:
        raise PreconditionError("n must be at least 2")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    e = expit(x @ PS_COEF)
    a = (rng.uniform(size=n) < e).astype(float)
    base = 100.0 + x @ OUTCOME_COEF
    eps = rng.standard_normal(n)
    y0 = base + eps
    y1 = base + TRUE_ATE + eps
    y = a * y1 + (1 - a) * y0
    return Dataset(y=y, a=a, x=x, column_names=BASE_NAMES,
                   truth=TruthInfo(true_ps=e, true_ate=TRUE_ATE, y1=y1, y0=y0))


def generate_binary_outcome(n: int, seed: int, effect: float = 0.1) -> Dataset:
    """Binary-outcome analogue of the benchmark for sensitivity checks.

    Treatment follows the benchmark propensity; Y ~ Bernoulli(expit(-0.2 +
    effect_logit * A + 0.3 X1 - 0.2 X2 + 0.2 X3)) where ``effect`` is the
    log-odds treatment effect.
    """
    if n < 2:
        raise PreconditionError("n must be at least 2")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    e = expit(x @ PS_COEF)
    a = (rng.uniform(size=n) < e).astype(float)
    lin = -0.2 + x @ np.array([0.3, -0.2, 0.2, 0.0])
    u = rng.uniform(size=n)
    y1 = (u < expit(lin + effect)).astype(float)
    y0 = (u < expit(lin)).astype(float)
    y = a * y1 + (1 - a) * y0
    true_ate = float(np.mean(expit(lin + effect) - expit(lin)))
    return Dataset(y=y, a=a, x=x, column_names=BASE_NAMES,
                   truth=TruthInfo(true_ps=e, true_ate=true_ate, y1=y1, y0=y0))


def add_irrelevant_covariates(d: Dataset, count: int, seed: int) -> Dataset:
    """Append ``count`` columns N(u_j, 1) with u_j ~ Uniform(-1, 1)."""
    if count < 0:
        raise DomainError("count must be non-negative")
    if count == 0:
        return d
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, size=count)
    extra = u + rng.standard_normal((d.n, count))
    start = d.p + 1
    names = [f"X{j}" for j in range(start, start + count)]
    while set(names) & set(d.column_names):
        start += count
        names = [f"X{j}" for j in range(start, start + count)]
    out = d.with_covariates(np.hstack([d.x, extra]), (*d.column_names, *names))
    return out


def irrelevant_means(count: int, seed: int) -> np.ndarray:
    """The u_j drawn by :func:`add_irrelevant_covariates` for the same seed."""
    return np.random.default_rng(seed).uniform(-1, 1, size=count)


def apply_misspecification(d: Dataset, which: str, style: str = "drop-to-X1") -> tuple[Design, Design]:
    """Designs (propensity, outcome) with the named model(s) misspecified.

    ``drop-to-X1`` keeps only X1 (plus the intercept) in the misspecified
    model; ``kang-schafer`` replaces its covariates by the standardized
    nonlinear transforms of X1..X4. ``which`` is ps, outcome, both or none.
    """
    if which not in ("ps", "outcome", "both", "none"):
        raise DomainError(f"which must be ps, outcome, both or none, got {which!r}")
    if style not in STYLES:
        raise DomainError(f"unknown misspecification style {style!r}")
    cols = tuple(c for c in BASE_NAMES if c in d.column_names)
    if len(cols) < 4:
        raise DomainError("misspecification needs covariates X1..X4")
    correct = Design(columns=cols) if d.p > 4 else Design()
    if style == "drop-to-X1":
        wrong = Design(columns=("X1",))
    else:
        wrong = Design(transform="kang-schafer")
    ps = wrong if which in ("ps", "both") else correct
    out = wrong if which in ("outcome", "both") else correct
    return ps, out


# ----------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    method: str
    abias: float
    ese: float
    rmse: float
    cp: float
    avl: float
    J: int
    failures: int = 0

    def __post_init__(self):
        if self.J >= 1 and not 0 <= self.cp <= 100:
            raise DomainError("coverage must lie in [0, 100]")


def compute_metrics(estimates, intervals, truth: float, method: str = "") -> MetricsRow:
    """ABias, ESE (denominator J - 1), RMSE (denominator J), CP (%) and AvL."""
    est = np.asarray(estimates, dtype=float).reshape(-1)
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2) if len(est) else np.empty((0, 2))
    if iv.shape[0] != len(est):
        raise DomainError(f"{len(est)} estimates but {iv.shape[0]} intervals")
    J = len(est)
    if J == 0:
        nan = float("nan")
        return MetricsRow(method, nan, nan, nan, nan, nan, 0)
    err = est - truth
    abias = abs(float(np.mean(est)) - truth)
    ese = float(np.std(est, ddof=1)) if J >= 2 else float("nan")
    rmse = math.sqrt(float(np.mean(err ** 2)))
    cover = (iv[:, 0] <= truth) & (truth <= iv[:, 1])
    cp = 100.0 * float(np.mean(cover))
    avl = float(np.mean(iv[:, 1] - iv[:, 0]))
    return MetricsRow(method, abias, ese, rmse, cp, avl, J)


# ----------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    n: int = 500
    ps_correct: bool = True
    outcome_correct: bool = True
    misspec_style: str = "drop-to-X1"
    add_irrelevant: int = 0
    J: int = 200
    base_seed: int = 0
    methods: tuple[str, ...] = ("proposed", "g-formula", "freq-dr")
    S: int = 5000
    burn_in: int = 1000
    n_chains: int = 8
    tilt_method: str = "smc"
    prune_keep_fraction: float = 0.8
    saarela_B: int = 1000
    level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.n < 50:
            raise ConfigError("n must be at least 50")
        if self.J < 1:
            raise ConfigError("J must be at least 1")
        if self.misspec_style not in STYLES:
            raise ConfigError(f"unknown misspecification style {self.misspec_style!r}")
        if self.add_irrelevant < 0:
            raise ConfigError("add_irrelevant must be non-negative")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown or missing methods: {bad}")
        if self.S < 100:
            raise ConfigError("S must be at least 100")

    @property
    def which(self) -> str:
        if self.ps_correct and self.outcome_correct:
            return "none"
        if self.ps_correct:
            return "outcome"
        if self.outcome_correct:
            return "ps"
        return "both"

    @classmethod
    def from_dict(cls, cfg: dict) -> "ScenarioSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown scenario field(s): {', '.join(sorted(unknown))}")
        try:
            return cls(**cfg)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class SimulationReport:
    scenario: ScenarioSpec
    rows: list[MetricsRow]
    per_replication: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def row(self, method: str) -> MetricsRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["Method", "ABias", "ESE", "RMSE", "CP", "AvL", "J", "Failures"])
            for r in self.rows:
                w.writerow([r.method, f"{r.abias:.6g}", f"{r.ese:.6g}", f"{r.rmse:.6g}",
                            f"{r.cp:.4g}", f"{r.avl:.6g}", r.J, r.failures])
        return path

    def to_dict(self) -> dict:
        return {"scenario": asdict(self.scenario), "rows": [asdict(r) for r in self.rows],
                "per_replication": self.per_replication, "failures": self.failures}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True), encoding="utf-8")
        return path

    def to_long_csv(self, path) -> Path:
        """One row per (method, replication) for external plotting."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "replication", "seed", "estimate", "ci_lo", "ci_hi"])
            for rec in self.per_replication:
                w.writerow([rec["method"], rec["replication"], rec["seed"],
                            f"{rec['estimate']:.17g}", f"{rec['ci_lo']:.17g}", f"{rec['ci_hi']:.17g}"])
        return path


def scenario_data(spec: ScenarioSpec, seed: int) -> Dataset:
    d = generate_kang_schafer(spec.n, seed)
    if spec.add_irrelevant:
        d = add_irrelevant_covariates(d, spec.add_irrelevant, derive_seeds(seed, 1)[0])
    return d


def run_one(spec: ScenarioSpec, j: int) -> tuple[list[dict], list[dict]]:
    """All requested methods on replication ``j``. Returns (records, failures)."""
    seed = spec.base_seed + j
    d = scenario_data(spec, seed)
    ps_design, out_design = apply_misspecification(d, spec.which, spec.misspec_style)
    ps_spec = PropensityModelSpec(design=ps_design)
    outcome_spec = OutcomeModelSpec(design=out_design)
    records, failures = [], []

    def record(method, lo, hi, est):
        records.append({"method": method, "replication": j, "seed": seed, "estimate": float(est),
                        "ci_lo": float(lo), "ci_hi": float(hi)})

    def fail(method, exc):
        failures.append({"method": method, "replication": j, "seed": seed,
                         "error": type(exc).__name__, "message": str(exc)})

    bayes = [m for m in spec.methods if m in ("proposed", "proposed-pruned", "g-formula")]
    alpha = beta = None
    if bayes:
        sampler = SamplerConfig(burn_in=spec.burn_in, n_chains=spec.n_chains)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                alpha, beta = sample_posteriors(d, ps_spec, outcome_spec, spec.S, seed, sampler)
        except PostCoupleError as exc:
            for m in bayes:
                fail(m, exc)
            bayes = []
    for method in spec.methods:
        if method in ("proposed", "proposed-pruned") and method in bayes:
            keep = spec.prune_keep_fraction if method == "proposed-pruned" else 1.0
            cfg = TiltConfig(method=spec.tilt_method, prune_keep_fraction=keep)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = tilt_and_summarize(d, alpha, beta, ps_spec, outcome_spec, cfg, seed,
                                             level=spec.level)
            except PostCoupleError as exc:
                fail(method, exc)
                continue
            s = res.summary
            record(method, s.ci_low, s.ci_high, s.mean)
        elif method == "g-formula" and method in bayes:
            s = summarize(ate_draws(beta, d, outcome_spec), spec.level)
            record(method, s.ci_low, s.ci_high, s.mean)
        elif method == "freq-dr":
            try:
                est = frequentist_dr_fit(d, ps_spec, outcome_spec)
            except PostCoupleError as exc:
                fail(method, exc)
                continue
            lo, hi = est.interval(spec.level)
            record(method, lo, hi, est.estimate)
        elif method == "saarela":
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    ap = saarela_bootstrap_dr(d, spec.saarela_B, derive_seeds(seed, 4)[3],
                                              ps_spec, outcome_spec)
            except PostCoupleError as exc:
                fail(method, exc)
                continue
            s = summarize(ap, spec.level)
            record(method, s.ci_low, s.ci_high, s.mean)
    return records, failures


def _run_one_star(args):
    return run_one(*args)


def run_replications(spec: ScenarioSpec, threads: int = 1, progress=None) -> SimulationReport:
    """Run J replications (seed base_seed + j for j = 1..J) and aggregate by method.

    Failed method runs are counted and excluded from the metrics; more than
    20% failures for any method raises :class:`TooManyFailuresError`.
    """
    jobs = [(spec, j) for j in range(1, spec.J + 1)]
    if threads > 1 and spec.J > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_one_star, jobs))
    else:
        results = []
        for job in jobs:
            results.append(run_one(*job))
            if progress is not None:
                progress(job[1], spec.J)
    records = [r for recs, _ in results for r in recs]
    failures = [f for _, fails in results for f in fails]
    rows = []
    for method in spec.methods:
        mine = [r for r in records if r["method"] == method]
        n_fail = sum(1 for f in failures if f["method"] == method)
        if n_fail > 0.2 * spec.J:
            raise TooManyFailuresError(f"{method}: {n_fail} of {spec.J} replications failed")
        row = compute_metrics([r["estimate"] for r in mine],
                              [(r["ci_lo"], r["ci_hi"]) for r in mine], TRUE_ATE, method)
        row.failures = n_fail
        rows.append(row)
    return SimulationReport(scenario=spec, rows=rows, per_replication=records, failures=failures)
