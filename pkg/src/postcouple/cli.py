"""Command-line interface: ``postcouple {fit,simulate,sensitivity,select}``.

Every run is driven by an optional JSON config file; command-line flags
override config values. The seed is mandatory. Reports go to files under
``--out``; stdout gets the report path and a one-line summary; errors are
written to stderr as JSON with exit codes 1 (config), 2 (data), 3 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path
from typing import Any

from . import __version__
from .data import Design, load_dataset
from .errors import ConfigError, DataError, DomainError, NumericalError, PostCoupleError
from .estimators import ate_draws, frequentist_dr_fit, saarela_bootstrap_dr, summarize
from .pipeline import derive_seeds, sample_posteriors, tilt_and_summarize
from .posteriors import OutcomeModelSpec, PropensityModelSpec, SamplerConfig
from .selection import SelectionConfig, coupled_selection_result
from .sensitivity import SensitivitySpec, XiPrior, sensitivity_ate
from .simulation import ScenarioSpec, run_replications
from .tilting import TiltConfig, export_history_csv

FIT_METHODS = ("proposed", "g-formula", "freq-dr", "saarela")
DEFAULT_PRUNE = 0.8


def _split(value):
    if value is None or isinstance(value, list):
        return value
    return [v.strip() for v in str(value).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="postcouple", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--format", choices=("json", "csv"))

    def data_flags(p):
        p.add_argument("--input", help="input CSV")
        p.add_argument("--outcome-col")
        p.add_argument("--treatment-col")
        p.add_argument("--outcome-family", choices=("gaussian-linear", "bernoulli-logistic",
                                                    "general-bayes-squared-loss"))
        p.add_argument("--ps-cols", help="comma-separated propensity covariates")
        p.add_argument("--outcome-cols", help="comma-separated outcome covariates")
        p.add_argument("--draws", type=int, help="posterior draws S")
        p.add_argument("--tilt", choices=("is", "smc"))

    fit = sub.add_parser("fit", help="coupled posterior ATE for one dataset")
    common(fit)
    data_flags(fit)
    fit.add_argument("--prune", nargs="?", type=float, const=DEFAULT_PRUNE,
                     help=f"prune keep fraction (default {DEFAULT_PRUNE} when given without a value)")
    fit.add_argument("--method", action="append", choices=FIT_METHODS,
                     help="method to run (repeatable); default: all")

    sim = sub.add_parser("simulate", help="replicated benchmark scenario")
    common(sim)
    sim.add_argument("--J", type=int, help="number of replications")
    sim.add_argument("--long-csv", action="store_true", help="also write a long-format CSV")

    sens = sub.add_parser("sensitivity", help="unmeasured-confounding sensitivity analysis")
    common(sens)
    data_flags(sens)
    sens.add_argument("--g", help='sensitivity prior as JSON, e.g. {"family":"point","value":0}')
    sens.add_argument("--M", type=int)
    sens.add_argument("--mode", choices=("per-unit", "pooled"))
    sens.add_argument("--scale", choices=("link", "probability"))

    sel = sub.add_parser("select", help="horseshoe confounder selection with coupled re-tilt")
    common(sel)
    data_flags(sel)
    sel.add_argument("--threshold", type=float)
    return parser


# ----------------------------------------------------------------------------
# configuration


def load_config(args) -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        if "command" in cfg and cfg["command"] != args.command:
            raise ConfigError(f"config is for {cfg['command']!r}, not {args.command!r}")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")}
    if "method" in flags:
        flags["methods"] = flags.pop("method")
    if flags.get("long_csv") is False:
        flags.pop("long_csv")
    if "g" in flags:
        try:
            flags["g"] = json.loads(flags["g"])
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--g is not valid JSON: {exc}") from None
    cfg.update(flags)
    if "seed" not in cfg:
        raise ConfigError("a seed is required (--seed or 'seed' in the config)")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg.setdefault("out", ".")
    cfg.setdefault("format", "json")
    if cfg["format"] not in ("json", "csv"):
        raise ConfigError("format must be json or csv")
    cfg.setdefault("threads", os.cpu_count() or 1)
    return cfg


def _specs(cfg) -> tuple[PropensityModelSpec, OutcomeModelSpec]:
    try:
        ps_cols = _split(cfg.get("ps_cols"))
        out_cols = _split(cfg.get("outcome_cols"))
        ps = PropensityModelSpec(design=Design(columns=tuple(ps_cols) if ps_cols else None))
        out = OutcomeModelSpec(family=cfg.get("outcome_family", "gaussian-linear"),
                               design=Design(columns=tuple(out_cols) if out_cols else None))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    return ps, out


def _tilt_cfg(cfg) -> TiltConfig:
    method = {"is": "importance", "smc": "smc"}.get(cfg.get("tilt", "smc"))
    if method is None:
        raise ConfigError("tilt must be 'is' or 'smc'")
    if cfg.get("prune") is not None and method != "smc":
        raise ConfigError("pruning needs the smc tilt")
    try:
        return TiltConfig(method=method, prune_keep_fraction=float(cfg.get("prune") or 1.0),
                          lambda_bar=float(cfg.get("lambda_bar", 50.0)), T=int(cfg.get("T", 200)),
                          smoothing=float(cfg.get("smoothing", 0.99)))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def _sampler(cfg) -> SamplerConfig:
    return SamplerConfig(burn_in=int(cfg.get("burn_in", 5000)), n_chains=int(cfg.get("n_chains", 1)))


def _dataset(cfg):
    if "input" not in cfg:
        raise ConfigError("an input CSV is required (--input)")
    return load_dataset(cfg["input"], cfg.get("outcome_col", "y"), cfg.get("treatment_col", "a"),
                        _split(cfg.get("covariates")) or "all")


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summaries(path: Path, rows: list[dict], fmt: str, extra: dict | None = None) -> Path:
    if fmt == "csv":
        path = path.with_suffix(".csv")
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "mean", "ci_low", "ci_high", "level", "ess", "sd", "n", "seed"])
            for r in rows:
                w.writerow([r["method"], repr(r["mean"]), repr(r["ci"][0]), repr(r["ci"][1]),
                            r["level"], repr(r["ess"]), repr(r["sd"]), r["n"], r["seed"]])
    else:
        path = path.with_suffix(".json")
        payload = {"results": rows, **(extra or {})}
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# commands


def cmd_fit(cfg) -> tuple[Path, str]:
    d = _dataset(cfg)
    ps_spec, outcome_spec = _specs(cfg)
    tilt = _tilt_cfg(cfg)
    methods = cfg.get("methods") or list(FIT_METHODS)
    bad = [m for m in methods if m not in FIT_METHODS]
    if bad:
        raise ConfigError(f"unknown method(s): {bad}")
    S = int(cfg.get("draws", 20_000))
    seed = cfg["seed"]
    level = float(cfg.get("level", 0.95))
    out = _outdir(cfg)
    rows: list[dict] = []
    diagnostics: dict[str, Any] = {}
    if "proposed" in methods or "g-formula" in methods:
        alpha, beta = sample_posteriors(d, ps_spec, outcome_spec, S, seed, _sampler(cfg))
        diagnostics["alpha_sampler"] = alpha.diagnostics
        diagnostics["beta_sampler"] = beta.diagnostics
        if "proposed" in methods:
            res = tilt_and_summarize(d, alpha, beta, ps_spec, outcome_spec, tilt, seed, level=level)
            rows.append(res.summary.to_dict("proposed", d.n, seed))
            hist = export_history_csv(res.particles, out / "tilt_history.csv")
            diagnostics["tilt"] = {"lambda": res.particles.lam, "ess": res.particles.ess,
                                   "history_path": str(hist),
                                   "events": sorted({h["event"] for h in res.particles.history}),
                                   **{k: v for k, v in res.particles.diagnostics.items()
                                      if isinstance(v, (int, float, str))}}
        if "g-formula" in methods:
            rows.append(summarize(ate_draws(beta, d, outcome_spec), level).to_dict("g-formula", d.n, seed))
    if "freq-dr" in methods:
        est = frequentist_dr_fit(d, ps_spec, outcome_spec)
        lo, hi = est.interval(level)
        rows.append({"method": "freq-dr", "mean": est.estimate, "ci": [lo, hi], "level": level,
                     "ess": float("nan"), "sd": est.se, "n": d.n, "seed": seed})
    if "saarela" in methods:
        ap = saarela_bootstrap_dr(d, int(cfg.get("saarela_B", 1000)), derive_seeds(seed, 4)[3],
                                  ps_spec, outcome_spec)
        rows.append(summarize(ap, level).to_dict("saarela", d.n, seed))
    path = _write_summaries(out / "fit_report", rows, cfg["format"], {"diagnostics": diagnostics})
    first = rows[0]
    return path, f"{first['method']}: mean {first['mean']:.6g} [{first['ci'][0]:.6g}, {first['ci'][1]:.6g}]"


def cmd_simulate(cfg) -> tuple[Path, str]:
    scen = dict(cfg.get("scenario", {}))
    if "J" in cfg:
        scen["J"] = cfg["J"]
    scen.setdefault("base_seed", cfg["seed"])
    spec = ScenarioSpec.from_dict(scen)
    report = run_replications(spec, threads=int(cfg["threads"]))
    out = _outdir(cfg)
    path = report.to_csv(out / "simulation.csv")
    report.to_json(out / "simulation.json")
    if cfg.get("long_csv"):
        report.to_long_csv(out / "simulation_long.csv")
    if cfg["format"] == "json":
        path = out / "simulation.json"
    line = "; ".join(f"{r.method}: ABias {r.abias:.4g} CP {r.cp:.3g}" for r in report.rows)
    return path, line


def cmd_sensitivity(cfg) -> tuple[Path, str]:
    d = _dataset(cfg)
    ps_spec, outcome_spec = _specs(cfg)
    try:
        sens = SensitivitySpec(g=XiPrior.from_dict(cfg.get("g", {"family": "point", "value": 0.0})),
                               M=int(cfg.get("M", 200)), mode=cfg.get("mode", "per-unit"),
                               scale=cfg.get("scale", "link"))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    summary = sensitivity_ate(d, (ps_spec, outcome_spec), sens, _tilt_cfg(cfg),
                              S=int(cfg.get("draws", 20_000)), seed=cfg["seed"],
                              sampler=_sampler(cfg), level=float(cfg.get("level", 0.95)))
    row = summary.to_dict("sensitivity", d.n, cfg["seed"])
    path = _write_summaries(_outdir(cfg) / "sensitivity_report", [row], cfg["format"],
                            {"g": cfg.get("g")})
    return path, f"sensitivity: mean {row['mean']:.6g} [{row['ci'][0]:.6g}, {row['ci'][1]:.6g}]"


def cmd_select(cfg) -> tuple[Path, str]:
    d = _dataset(cfg)
    ps_spec, outcome_spec = _specs(cfg)
    try:
        sel_cfg = SelectionConfig(threshold=float(cfg.get("threshold", 0.01)), tilt_cfg=_tilt_cfg(cfg))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    res = coupled_selection_result(d, outcome_spec, ps_spec, sel_cfg, int(cfg.get("draws", 20_000)),
                                   cfg["seed"], _sampler(cfg), level=float(cfg.get("level", 0.95)))
    out = _outdir(cfg)
    path = out / "selection_report.json"
    report = res.report()
    report["ate"].update({"n": d.n, "seed": cfg["seed"]})
    path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    s = res.summary
    return path, f"selected {len(res.selected)} of {len(res.selected) + len(res.dropped)}; mean {s.mean:.6g}"


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "sensitivity": cmd_sensitivity,
            "select": cmd_select}


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("row", "column", "stratum", "last_lambda", "residual"):
        if hasattr(exc, attr):
            payload[attr] = getattr(exc, attr)
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            path, line = COMMANDS[args.command](cfg)
        if caught:
            log = Path(cfg["out"]) / f"{args.command}_warnings.log"
            log.write_text("\n".join(str(w.message) for w in caught) + "\n", encoding="utf-8")
    except ConfigError as exc:
        return _fail(exc, 1)
    except (DataError, FileNotFoundError) as exc:
        return _fail(exc, 2)
    except NumericalError as exc:
        return _fail(exc, 3)
    except PostCoupleError as exc:
        return _fail(exc, 3)
    print(path)
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
