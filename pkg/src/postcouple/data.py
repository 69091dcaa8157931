"""Observed-data container, CSV ingestion and covariate transforms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError, SchemaError


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TruthInfo:
    """Ground truth carried by simulated datasets."""

    true_ps: np.ndarray | None = None
    true_ate: float | None = None
    y1: np.ndarray | None = None
    y0: np.ndarray | None = None

    def __post_init__(self):
        if self.true_ps is not None:
            ps = _frozen(self.true_ps)
            if np.any((ps <= 0) | (ps >= 1)):
                raise DomainError("true propensity scores must lie strictly in (0, 1)")
            object.__setattr__(self, "true_ps", ps)
        for name in ("y1", "y0"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(val))


@dataclass(frozen=True)
class Dataset:
    """Observed triplets (outcome, binary treatment, covariates).

    Arrays are copied and made read-only on construction. Only the structural
    invariants are enforced here; use :func:`validate` for the substantive
    checks (both arms present, finite values, ...).
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    column_names: tuple[str, ...]
    truth: TruthInfo | None = None

    def __post_init__(self):
        y = _frozen(self.y).reshape(-1)
        a = _frozen(self.a).reshape(-1)
        x = _frozen(self.x)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1))
        names = tuple(str(c) for c in self.column_names)
        if not (len(y) == len(a) == x.shape[0]):
            raise DomainError(
                f"row count mismatch: y={len(y)}, a={len(a)}, x={x.shape[0]}")
        if x.shape[1] != len(names):
            raise DomainError(f"{x.shape[1]} covariate columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise DomainError("duplicate covariate column names")
        if not np.all((a == 0) | (a == 1)):
            raise DomainError("treatment values must be 0 or 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "column_names", names)
        if self.truth is not None and self.truth.y1 is not None and self.truth.y0 is not None:
            implied = a * self.truth.y1 + (1 - a) * self.truth.y0
            if not np.allclose(implied, y, rtol=0, atol=1e-9):
                raise DomainError("observed outcomes disagree with the potential outcomes")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate column {name!r}") from None

    def columns(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.column_index(c) for c in names]
        return self.x[:, idx]

    def with_covariates(self, x: np.ndarray, column_names: Sequence[str]) -> "Dataset":
        return replace(self, x=x, column_names=tuple(column_names))

    def subset_rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        truth = self.truth
        if truth is not None:
            truth = TruthInfo(
                true_ps=None if truth.true_ps is None else truth.true_ps[idx],
                true_ate=truth.true_ate,
                y1=None if truth.y1 is None else truth.y1[idx],
                y0=None if truth.y0 is None else truth.y0[idx],
            )
        return Dataset(self.y[idx], self.a[idx], self.x[idx], self.column_names, truth)


@dataclass
class ValidationReport:
    ok: bool
    issues: list[tuple[str, str]] = field(default_factory=list)
    treated_count: int = 0
    control_count: int = 0

    @property
    def errors(self) -> list[str]:
        return [msg for sev, msg in self.issues if sev == "error"]

    @property
    def warnings(self) -> list[str]:
        return [msg for sev, msg in self.issues if sev == "warning"]


def validate(d: Dataset) -> ValidationReport:
    """Check a dataset and return the problems found instead of raising."""
    issues: list[tuple[str, str]] = []
    treated = int(np.sum(d.a == 1))
    control = int(np.sum(d.a == 0))
    if d.n < 2:
        issues.append(("error", f"need at least 2 units, got {d.n}"))
    if d.p < 1:
        issues.append(("error", "no covariate columns"))
    if treated == 0:
        issues.append(("error", "no treated units"))
    if control == 0:
        issues.append(("error", "no control units"))
    if not np.all(np.isfinite(d.y)):
        issues.append(("error", "non-finite outcome values"))
    bad_cols = [c for j, c in enumerate(d.column_names) if not np.all(np.isfinite(d.x[:, j]))]
    if bad_cols:
        issues.append(("error", f"non-finite covariate values in {', '.join(bad_cols)}"))
    if d.n >= 2:
        for j, c in enumerate(d.column_names):
            col = d.x[:, j]
            if np.all(np.isfinite(col)) and np.ptp(col) == 0:
                issues.append(("warning", f"covariate {c!r} is constant"))
        if np.all(np.isfinite(d.y)) and np.ptp(d.y) == 0:
            issues.append(("warning", "outcome is constant"))
    ok = not any(sev == "error" for sev, _ in issues)
    return ValidationReport(ok=ok, issues=issues, treated_count=treated, control_count=control)


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} at row {row}, column {column!r}",
                         row=row, column=column) from None
    if math.isnan(value):
        raise ParseError(f"missing value at row {row}, column {column!r}", row=row, column=column)
    return value


def load_dataset(path, outcome_col: str, treatment_col: str,
                 covariate_cols: Sequence[str] | str = "all") -> Dataset:
    """Read a CSV file with a header row into a :class:`Dataset`.

    ``covariate_cols="all"`` takes every column other than the outcome and the
    treatment, in file order. Rows are numbered from 1 (the first data row) in
    error messages.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]

    if isinstance(covariate_cols, str):
        if covariate_cols != "all":
            raise SchemaError(f"covariate_cols must be a list of names or 'all', got {covariate_cols!r}")
        covariate_cols = [h for h in header if h not in (outcome_col, treatment_col)]
    wanted = [outcome_col, treatment_col, *covariate_cols]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    index = {h: i for i, h in enumerate(header)}

    n = len(rows)
    y = np.empty(n)
    a = np.empty(n)
    x = np.empty((n, len(covariate_cols)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r} has {len(row)} fields, expected {len(header)}", row=r)
        y[r - 1] = _parse_float(row[index[outcome_col]], r, outcome_col)
        t = _parse_float(row[index[treatment_col]], r, treatment_col)
        if t not in (0.0, 1.0):
            raise DomainError(f"treatment value {row[index[treatment_col]]!r} at row {r} is not 0 or 1")
        a[r - 1] = t
        for j, c in enumerate(covariate_cols):
            x[r - 1, j] = _parse_float(row[index[c]], r, c)
    return Dataset(y=y, a=a, x=x, column_names=tuple(covariate_cols))


def write_dataset(d: Dataset, path, outcome_col: str = "y", treatment_col: str = "a") -> Path:
    """Write ``d`` as CSV with 17 significant digits (exact round trip)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([outcome_col, treatment_col, *d.column_names])
        for i in range(d.n):
            w.writerow([f"{d.y[i]:.17g}", str(int(d.a[i])), *(f"{v:.17g}" for v in d.x[i])])
    return path


def standardize_covariates(d: Dataset, cols: Sequence[str] | None = None) -> Dataset:
    """Center and scale the selected columns (sample sd, denominator n-1)."""
    names = list(d.column_names) if cols is None else list(cols)
    x = d.x.copy()
    for c in names:
        j = d.column_index(c)
        sd = np.std(x[:, j], ddof=1)
        if not sd > 0:
            raise DomainError(f"column {c!r} has zero variance and cannot be standardized")
        x[:, j] = (x[:, j] - np.mean(x[:, j])) / sd
    return d.with_covariates(x, d.column_names)


KS_NAMES = ("Z1", "Z2", "Z3", "Z4")


def kang_schafer_features(x4: np.ndarray) -> np.ndarray:
    """The four nonlinear transforms of (X1, X2, X3, X4), before standardization."""
    x4 = np.atleast_2d(np.asarray(x4, dtype=float))
    x1, x2, x3, xx4 = x4[:, 0], x4[:, 1], x4[:, 2], x4[:, 3]
    return np.column_stack([
        np.exp(x1 / 2.0),
        10.0 + x2 / (1.0 + np.exp(x1)),
        (0.6 + x1 * x3 / 25.0) ** 3,
        (20.0 + x1 + xx4) ** 2,
    ])


def kang_schafer_transform(d: Dataset) -> Dataset:
    """Replace the covariates with the standardized Kang-Schafer transforms.

    Uses columns named X1..X4 when present, otherwise the first four columns.
    Standardization uses full-sample statistics.
    """
    if d.p < 4:
        raise DomainError(f"the Kang-Schafer transform needs at least 4 covariates, got {d.p}")
    names = ("X1", "X2", "X3", "X4")
    if all(c in d.column_names for c in names):
        base = d.columns(names)
    else:
        base = d.x[:, :4]
    z = kang_schafer_features(base)
    out = d.with_covariates(z, KS_NAMES)
    return standardize_covariates(out)


@dataclass(frozen=True)
class Design:
    """Which covariates enter a model.

    ``columns=None`` means all covariates of the dataset. ``transform`` may be
    ``"kang-schafer"``, in which case the covariates are the four transformed
    and standardized columns Z1..Z4 computed from X1..X4.
    """

    columns: tuple[str, ...] | None = None
    intercept: bool = True
    transform: str | None = None

    def __post_init__(self):
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))
        if self.transform not in (None, "kang-schafer"):
            raise DomainError(f"unknown design transform {self.transform!r}")

    def covariates(self, d: Dataset) -> tuple[np.ndarray, tuple[str, ...]]:
        if self.transform == "kang-schafer":
            d = kang_schafer_transform(d)
            if self.columns is None:
                return d.x, d.column_names
        if self.columns is None:
            return d.x, d.column_names
        return np.ascontiguousarray(d.columns(self.columns)), self.columns

    def n_covariates(self, d: Dataset) -> int:
        if self.columns is not None:
            return len(self.columns)
        return 4 if self.transform == "kang-schafer" else d.p

    def restricted(self, columns: Sequence[str]) -> "Design":
        return replace(self, columns=tuple(columns))
