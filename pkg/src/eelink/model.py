"""Domain types shared across the package: datasets, weights, estimating systems."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DataValidationError

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Observation:
    y: float
    z: int
    x: tuple


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """n observations of outcome ``y``, binary treatment ``z`` and covariates ``x``.

    Stored column-wise as read-only numpy arrays. Construction only enforces
    shapes; the statistical invariants (binary z, finiteness, both arms
    present) are checked by :func:`validate_dataset` / :func:`require_valid`
    so that invalid inputs can still be reported on.
    """

    y: NDArray[np.float64]
    z: NDArray
    x: NDArray[np.float64]
    _design_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        z = np.asarray(self.z)
        if z.dtype.kind == "f" and np.all(np.isfinite(z)) and np.all(z == np.round(z)):
            z = z.astype(np.int64)
        elif z.dtype.kind in "bui":
            z = z.astype(np.int64)
        z = z.reshape(-1)
        if not (len(y) == len(z) == x.shape[0]):
            raise DataValidationError(
                f"length mismatch: y={len(y)}, z={len(z)}, x rows={x.shape[0]}"
            )
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "z", _readonly(z))
        object.__setattr__(self, "x", _readonly(x))

    @classmethod
    def from_rows(cls, rows: Sequence[Observation]) -> "Dataset":
        report = validate_dataset(rows)
        ragged = [v for v in report.violations if v.startswith("ragged")]
        if ragged:
            raise DataValidationError(ragged[0], ragged)
        return cls(
            y=[r.y for r in rows],
            z=[r.z for r in rows],
            x=np.array([list(r.x) for r in rows], dtype=float).reshape(len(rows), -1),
        )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def q(self) -> int:
        return self.x.shape[1]

    def rows(self) -> list[Observation]:
        return [
            Observation(float(self.y[i]), int(self.z[i]), tuple(self.x[i].tolist()))
            for i in range(self.n)
        ]

    def design(self, intercept: bool) -> NDArray[np.float64]:
        """Cached, read-only nuisance design matrix (see :func:`design_matrix`)."""
        key = bool(intercept)
        cached = self._design_cache.get(key)
        if cached is None:
            cached = design_matrix(self, key)
            cached.setflags(write=False)
            self._design_cache[key] = cached
        return cached

    def with_y(self, y) -> "Dataset":
        return Dataset(y=y, z=self.z, x=self.x)


def validate_dataset(d) -> ValidationReport:
    """List every violated dataset invariant; an empty report means valid.

    Accepts a :class:`Dataset` or a sequence of :class:`Observation` rows
    (the latter is the only way a ragged covariate block can be expressed).
    Row numbers in messages are 1-based.
    """
    violations = []
    if isinstance(d, Dataset):
        y, z, x = d.y, d.z, d.x
        widths = None
    else:
        rows = list(d)
        widths = [len(r.x) for r in rows]
        if widths and len(set(widths)) > 1:
            first = widths[0]
            bad = next(i for i, w in enumerate(widths) if w != first)
            violations.append(
                f"ragged covariates at row {bad + 1}: expected {first}, got {widths[bad]}"
            )
        y = np.array([r.y for r in rows], dtype=float)
        z = np.array([r.z for r in rows], dtype=object)
        x = None if violations else np.array([list(r.x) for r in rows], dtype=float)

    n = len(y)
    if n < 2:
        violations.append(f"need at least 2 observations, got {n}")
    for i, zi in enumerate(z):
        try:
            ok = float(zi) in (0.0, 1.0)
        except (TypeError, ValueError):
            ok = False
        if not ok:
            violations.append(f"non-binary treatment at row {i + 1}: {zi!r}")
    for i in np.flatnonzero(~np.isfinite(y)):
        violations.append(f"non-finite outcome at row {i + 1}")
    if x is not None and x.size:
        for i in np.flatnonzero(~np.all(np.isfinite(x), axis=1)):
            violations.append(f"non-finite covariate at row {i + 1}")
    zb = [zi for zi in z if _is01(zi)]
    treated = sum(float(zi) for zi in zb)
    if n >= 1 and (treated == 0 or treated == len(zb)):
        violations.append("single treatment arm")
    return ValidationReport(tuple(violations))


def _is01(v):
    try:
        return float(v) in (0.0, 1.0)
    except (TypeError, ValueError):
        return False


def require_valid(d: Dataset) -> Dataset:
    report = validate_dataset(d)
    if not report.ok:
        raise DataValidationError("; ".join(report.violations), report.violations)
    return d


def design_matrix(d: Dataset, intercept: bool) -> NDArray[np.float64]:
    """Covariate block, optionally prefixed by a constant column of ones."""
    if intercept:
        return np.column_stack([np.ones(d.n), d.x])
    return np.array(d.x, dtype=float)


@dataclass(frozen=True, eq=False)
class WeightVector:
    """A point on the probability simplex."""

    values: NDArray[np.float64]

    def __post_init__(self):
        w = np.asarray(self.values, dtype=float).reshape(-1)
        if w.size == 0:
            raise DataValidationError("empty weight vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataValidationError("weights must be finite and non-negative")
        total = math.fsum(w)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise DataValidationError(f"weights sum to {total!r}, not 1")
        object.__setattr__(self, "values", _readonly(w))

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def as_weights(w) -> NDArray[np.float64]:
    if isinstance(w, WeightVector):
        return w.values
    return np.asarray(w, dtype=float)


@dataclass(frozen=True)
class AnalyticDerivatives:
    """Per-observation derivative callables of an estimating system.

    ``dm_dtheta(d, theta, h)`` -> (n, p, p), ``dm_dh(d, theta, h)`` -> (n, p, q),
    ``du_dh(d, h)`` -> (n, q, q).
    """

    dm_dtheta: Callable
    dm_dh: Optional[Callable] = None
    du_dh: Optional[Callable] = None


@dataclass(frozen=True)
class NuisanceFit:
    h: NDArray[np.float64]
    iterations: int
    score_sup_norm: float
    converged: bool


@dataclass(frozen=True)
class EstimandSpec:
    """An estimating system: target score ``m`` and optional nuisance score ``u``.

    Scores are vectorised over the dataset: ``target_score(d, theta, h)``
    returns an (n, p) array and ``nuisance_score(d, h)`` an (n, q_nuis)
    array. ``fit_nuisance`` and ``closed_form`` are optional fast paths
    (weighted nuisance solve and weighted target root); when absent the
    generic Newton solvers are used.
    """

    kind: str
    p: int
    q_nuis: int
    target_score: Callable
    nuisance_score: Optional[Callable] = None
    analytic_derivatives: Optional[AnalyticDerivatives] = None
    intercept: bool = True
    fit_nuisance: Optional[Callable] = None
    closed_form: Optional[Callable] = None
    names: tuple = ()

    def __post_init__(self):
        if self.kind not in ("gest", "ipw", "att", "psreg", "custom"):
            raise ValueError(f"unknown estimand kind {self.kind!r}")
        if self.q_nuis and self.nuisance_score is None:
            raise ValueError("q_nuis > 0 requires a nuisance_score")
        if not self.names:
            names = ("theta",) if self.p == 1 else tuple(f"theta_{k + 1}" for k in range(self.p))
            object.__setattr__(self, "names", names)

    def m(self, d, theta, h=None):
        return np.asarray(self.target_score(d, np.atleast_1d(theta), h), dtype=float).reshape(d.n, self.p)

    def u(self, d, h):
        return np.asarray(self.nuisance_score(d, np.atleast_1d(h)), dtype=float).reshape(d.n, self.q_nuis)


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    theta_draws: NDArray[np.float64]
    method: str
    seed: int
    h_draws: Optional[NDArray[np.float64]] = None
    retries_total: int = 0

    def __post_init__(self):
        if self.method not in ("known_h", "plugin", "linked", "augmented", "llb"):
            raise ValueError(f"unknown method {self.method!r}")
        t = np.atleast_2d(np.asarray(self.theta_draws, dtype=float))
        if t.shape[0] < 1 or not np.all(np.isfinite(t)):
            raise ValueError("theta_draws must have at least one finite row")
        if (self.h_draws is not None) != (self.method in ("linked", "augmented")):
            raise ValueError("h_draws present iff method is linked or augmented")
        object.__setattr__(self, "theta_draws", _readonly(t))
        if self.h_draws is not None:
            hd = np.atleast_2d(np.asarray(self.h_draws, dtype=float))
            if hd.shape[0] != t.shape[0] or not np.all(np.isfinite(hd)):
                raise ValueError("h_draws must be finite with one row per draw")
            object.__setattr__(self, "h_draws", _readonly(hd))

    @property
    def B(self) -> int:
        return self.theta_draws.shape[0]


# -- CSV I/O ---------------------------------------------------------------


def read_dataset_csv(path) -> Dataset:
    """Parse ``y,z,x1,...,xq``. Raises DataValidationError on bad input."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        q = len(header) - 2
        expected = ["y", "z"] + [f"x{k + 1}" for k in range(q)]
        if q < 1 or header != expected:
            raise DataValidationError(
                f"{path}: header must be {','.join(expected) if q >= 1 else 'y,z,x1,...'}, got {','.join(header)}"
            )
        ys, zs, xs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != q + 2:
                raise DataValidationError(
                    f"{path}:{lineno}: expected {q + 2} fields, got {len(row)}"
                )
            try:
                y = float(row[0])
                xvals = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise DataValidationError(f"{path}:{lineno}: {exc}") from None
            zt = row[1].strip()
            if zt not in ("0", "1", "0.0", "1.0"):
                raise DataValidationError(
                    f"{path}:{lineno}: non-binary treatment {zt!r}",
                    [f"non-binary treatment at row {lineno - 1}: {zt!r}"],
                )
            ys.append(y)
            zs.append(int(float(zt)))
            xs.append(xvals)
    return Dataset(y=ys, z=zs, x=np.array(xs, dtype=float).reshape(len(ys), q))


def write_dataset_csv(d: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y", "z"] + [f"x{k + 1}" for k in range(d.q)])
        for i in range(d.n):
            writer.writerow([repr(float(d.y[i])), int(d.z[i])] + [repr(float(v)) for v in d.x[i]])
