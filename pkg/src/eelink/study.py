"""Replicated simulation studies and their summary tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import dgp
from .engines import (
    EngineConfig,
    PluginMethod,
    augmented_solver,
    bb_posterior_augmented,
    bb_posterior_known_h,
    bb_posterior_linked,
    bb_posterior_plugin,
    known_h_solver,
    linked_solver,
    plugin_nuisance,
)
from .errors import EELinkError, ReplicateFailed, StudyFailure, ValidationError
from .model import PosteriorDraws, read_dataset_csv, require_valid
from .rng import MAX_SEED, Purpose, StreamKey, derive_stream, equal_weights
from .sandwich import sandwich_linked
from .scores import KINDS, make_spec

METHODS = ("linked", "augmented", "plugin", "known")
FAILURE_TOLERANCE = 0.01
Z975 = 1.96


@dataclass(frozen=True)
class StudyConfig:
    """Everything needed to reproduce a study.

    ``design`` is ``gest6``, ``ipw2`` or the path of a dataset CSV; with a
    CSV every replicate reuses the same data and only the weights vary, and
    ``theta0`` must be given for coverage. For ``method == "plugin"`` the
    plug-in's own intercept flag governs the nuisance model of the draws;
    ``intercept`` governs the linked fit behind the frequentist estimate
    and sandwich.
    """

    design: str
    estimand: str
    method: str
    seed: int
    n: Optional[int] = None
    plugin: Optional[PluginMethod] = None
    replicates: int = 200
    B: int = 500
    intercept: bool = True
    quantiles: tuple = (0.025, 0.975)
    workers: Optional[int] = None
    theta0: Optional[float] = None
    max_retries: int = 5
    epsilon_overlap: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "quantiles", tuple(float(v) for v in self.quantiles))
        if self.estimand not in KINDS:
            raise ValidationError("estimand", f"must be one of {', '.join(KINDS)}")
        if self.method not in METHODS:
            raise ValidationError("method", f"must be one of {', '.join(METHODS)}")
        if self.method == "plugin" and self.plugin is None:
            raise ValidationError("plugin", "plugin required when method is plugin")
        if self.is_simulated:
            if self.n is None or self.n < 2:
                raise ValidationError("n", "simulation designs need n >= 2")
        elif not self.design.endswith(".csv"):
            raise ValidationError("design", f"must be {', '.join(dgp.DESIGNS)} or a .csv path")
        elif self.method == "known":
            raise ValidationError("method", "known-nuisance runs need a simulation design")
        if self.replicates < 1:
            raise ValidationError("replicates", "must be at least 1")
        if self.B < 2:
            raise ValidationError("B", "must be at least 2")
        if not 0 <= self.seed <= MAX_SEED:
            raise ValidationError("seed", "must be a 64-bit unsigned integer")
        if len(self.quantiles) != 2 or not 0 < self.quantiles[0] < self.quantiles[1] < 1:
            raise ValidationError("quantiles", "quantiles must increase strictly within (0, 1)")
        if self.workers is not None and self.workers < 1:
            raise ValidationError("workers", "must be at least 1")
        if self.max_retries < 0:
            raise ValidationError("max_retries", "must be non-negative")
        if not 0 < self.epsilon_overlap < 0.5:
            raise ValidationError("epsilon_overlap", "must lie in (0, 0.5)")

    @property
    def is_simulated(self) -> bool:
        return self.design in dgp.DESIGNS

    def true_theta(self):
        if self.is_simulated:
            t0 = dgp.DESIGNS[self.design].theta0 if self.theta0 is None else self.theta0
        else:
            t0 = self.theta0
        # psreg's second coordinate has no stated truth
        return [t0] if self.estimand != "psreg" else [t0, None]

    def to_dict(self, include_workers=True) -> dict:
        out = asdict(self)
        out["quantiles"] = list(self.quantiles)
        if not include_workers:
            out.pop("workers")
        return out


@dataclass(frozen=True)
class PosteriorSummary:
    mean: list
    var: list
    ci_lo: list
    ci_hi: list
    covered: list


def summarize_posterior(draws, theta0, quantiles=(0.025, 0.975)) -> PosteriorSummary:
    """Mean, unbiased variance and percentile interval per coordinate.

    The gamma-quantile of the sorted draws is the linear interpolation at
    1-based position ``1 + (B - 1) * gamma``.
    """
    t = draws.theta_draws if isinstance(draws, PosteriorDraws) else np.atleast_2d(np.asarray(draws, dtype=float))
    if t.shape[0] < 2:
        raise ValueError("need at least 2 draws")
    lo, hi = np.quantile(t, quantiles, axis=0, method="linear")
    theta0 = list(np.atleast_1d(np.asarray(theta0, dtype=object)))
    covered = [None if t0 is None else bool(l <= float(t0) <= h) for t0, l, h in zip(theta0, lo, hi)]
    return PosteriorSummary(
        mean=t.mean(axis=0).tolist(),
        var=t.var(axis=0, ddof=1).tolist(),
        ci_lo=lo.tolist(),
        ci_hi=hi.tolist(),
        covered=covered,
    )


@dataclass(frozen=True)
class ReplicateSummary:
    replicate_id: int
    freq_estimate: list
    post_mean: list
    post_var: list
    ci_lo: list
    ci_hi: list
    covered: list
    sandwich_V: list
    retries: int
    draws: Optional[PosteriorDraws] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "draws"}
        return out

    @classmethod
    def from_dict(cls, obj) -> "ReplicateSummary":
        return cls(**{f.name: obj[f.name] for f in fields(cls) if f.name != "draws"})


TABLE_FIELDS = (
    "avg_post_mean", "empirical_freq_mean", "avg_post_var_times_n", "empirical_freq_var_times_n",
    "avg_sandwich", "avg_ci", "freq_ci", "coverage_pct",
)


@dataclass(frozen=True)
class StudyTable:
    """Per-coordinate aggregates across replicates (lists of length p).

    ``freq_ci`` is pooled: mean frequentist estimate
    +/- 1.96 * sqrt(average sandwich / n).
    """

    avg_post_mean: list
    empirical_freq_mean: list
    avg_post_var_times_n: list
    empirical_freq_var_times_n: list
    avg_sandwich: list
    avg_ci: list
    freq_ci: list
    coverage_pct: list
    names: list = field(default_factory=list)
    n: int = 0
    replicates_used: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj) -> "StudyTable":
        kwargs = {f.name: obj[f.name] for f in fields(cls) if f.name in obj}
        for k in ("avg_ci", "freq_ci"):
            kwargs[k] = [list(v) for v in kwargs[k]]
        return cls(**kwargs)


@dataclass(frozen=True)
class StudyResult:
    config: StudyConfig
    table: StudyTable
    replicates: list
    failures: list

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(include_workers=False),
            "table": self.table.to_dict(),
            "replicates": [r.to_dict() for r in self.replicates],
            "failures": list(self.failures),
        }


# -- per-replicate work ----------------------------------------------------

_CSV_CACHE: dict = {}


def _load_data(cfg: StudyConfig, replicate_id: int):
    if cfg.is_simulated:
        stream = derive_stream(StreamKey(cfg.seed, replicate_id, 0, Purpose.DATA))
        return dgp.generate(cfg.design, cfg.n, stream)
    path = str(Path(cfg.design).resolve())
    if path not in _CSV_CACHE:
        _CSV_CACHE[path] = require_valid(read_dataset_csv(path))
    return _CSV_CACHE[path], None


def run_replicate(cfg: StudyConfig, replicate_id: int, *, keep_draws=False) -> ReplicateSummary:
    """Generate one dataset, compute its frequentist estimate, sandwich and posterior."""
    try:
        return _run_replicate(cfg, replicate_id, keep_draws)
    except EELinkError as exc:
        raise ReplicateFailed(replicate_id, exc) from exc


def _run_replicate(cfg, replicate_id, keep_draws):
    d, truth = _load_data(cfg, replicate_id)
    require_valid(d)
    ecfg = EngineConfig(B=cfg.B, seed=cfg.seed, max_retries=cfg.max_retries,
                        epsilon_overlap=cfg.epsilon_overlap, replicate_id=replicate_id)
    eps = cfg.epsilon_overlap
    ew = equal_weights(d.n)
    linked_spec = make_spec(cfg.estimand, d.q, cfg.intercept)
    theta_n, h_n = linked_solver(linked_spec, d, eps)(ew)

    if cfg.method == "linked":
        freq = theta_n
        draws = bb_posterior_linked(linked_spec, d, ecfg)
    elif cfg.method == "augmented":
        freq, _ = augmented_solver(linked_spec, d, eps)(ew)
        draws = bb_posterior_augmented(linked_spec, d, ecfg)
    elif cfg.method == "known":
        h0 = truth.nuisance(cfg.intercept)
        freq = known_h_solver(linked_spec, d, h0, eps)(ew)
        draws = bb_posterior_known_h(linked_spec, d, h0, ecfg)
    else:
        plugin = cfg.plugin
        spec = make_spec(cfg.estimand, d.q, plugin.intercept)
        h0 = truth.nuisance(plugin.intercept) if truth is not None else None
        h_hat, pre = plugin_nuisance(spec, d, plugin, ecfg, h0)
        freq = known_h_solver(spec, d, h_hat, eps)(ew)
        draws = bb_posterior_plugin(spec, d, plugin, ecfg, nuisance_estimate=(h_hat, pre))

    V = sandwich_linked(linked_spec, d, theta_n, h_n).V
    s = summarize_posterior(draws, cfg.true_theta(), cfg.quantiles)
    return ReplicateSummary(
        replicate_id=replicate_id,
        freq_estimate=np.atleast_1d(freq).tolist(),
        post_mean=s.mean, post_var=s.var, ci_lo=s.ci_lo, ci_hi=s.ci_hi, covered=s.covered,
        sandwich_V=np.asarray(V).tolist(),
        retries=draws.retries_total,
        draws=draws if keep_draws else None,
    )


def _replicate_task(args):
    cfg, rid, keep = args
    try:
        return run_replicate(cfg, rid, keep_draws=keep)
    except ReplicateFailed as exc:
        return {"replicate_id": rid, "error": f"{type(exc.cause).__name__}: {exc.cause}"}


# -- aggregation -----------------------------------------------------------


def _mean(vals):
    # fsum makes every aggregate independent of replicate order
    vals = [float(v) for v in vals]
    return math.fsum(vals) / len(vals)


def _var(vals):
    m = _mean(vals)
    return math.fsum((v - m) ** 2 for v in vals) / (len(vals) - 1)


def aggregate(summaries, n: int, names) -> StudyTable:
    if not summaries:
        raise StudyFailure("no successful replicates to aggregate")
    p = len(names)
    R = len(summaries)
    cols = range(p)

    def col(attr, k):
        return [getattr(s, attr)[k] for s in summaries]

    avg_sw = [_mean(s.sandwich_V[k][k] for s in summaries) for k in cols]
    freq_mean = [_mean(col("freq_estimate", k)) for k in cols]
    coverage = []
    for k in cols:
        flags = col("covered", k)
        coverage.append(None if any(f is None for f in flags) else 100.0 * sum(flags) / R)
    half = [Z975 * math.sqrt(avg_sw[k] / n) for k in cols]
    return StudyTable(
        avg_post_mean=[_mean(col("post_mean", k)) for k in cols],
        empirical_freq_mean=freq_mean,
        avg_post_var_times_n=[_mean(col("post_var", k)) * n for k in cols],
        empirical_freq_var_times_n=[_var(col("freq_estimate", k)) * n if R >= 2 else None for k in cols],
        avg_sandwich=avg_sw,
        avg_ci=[[_mean(col("ci_lo", k)), _mean(col("ci_hi", k))] for k in cols],
        freq_ci=[[freq_mean[k] - half[k], freq_mean[k] + half[k]] for k in cols],
        coverage_pct=coverage,
        names=list(names),
        n=int(n),
        replicates_used=R,
    )


def resolve_workers(workers) -> int:
    if workers is None:
        try:
            return max(1, len(os.sched_getaffinity(0)))
        except AttributeError:
            return os.cpu_count() or 1
    return int(workers)


def run_study(cfg: StudyConfig, *, workers=None, keep_draws=False) -> StudyResult:
    """Run every replicate and aggregate.

    Replicates are independent tasks on disjoint substreams; results are
    collected in replicate order, so the outcome does not depend on the
    worker count. Aborts with :class:`StudyFailure` when more than 1% of
    replicates fail; otherwise failures are excluded and listed.
    """
    nworkers = resolve_workers(workers if workers is not None else cfg.workers)
    tasks = [(cfg, rid, keep_draws) for rid in range(cfg.replicates)]
    if nworkers == 1:
        results = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, len(tasks) // (4 * nworkers))))
    summaries = [r for r in results if isinstance(r, ReplicateSummary)]
    failures = [r for r in results if isinstance(r, dict)]
    if len(failures) > FAILURE_TOLERANCE * cfg.replicates:
        raise StudyFailure(
            f"{len(failures)} of {cfg.replicates} replicates failed (tolerance {FAILURE_TOLERANCE:.0%}); "
            f"first: {failures[0]['error']}"
        )
    d, _ = _load_data(cfg, 0)
    names = make_spec(cfg.estimand, d.q, cfg.intercept).names
    return StudyResult(cfg, aggregate(summaries, d.n, names), summaries, failures)


# -- emission --------------------------------------------------------------

ROW_LABELS = (
    ("avg_post_mean", "Average of Posterior Means"),
    ("empirical_freq_mean", "Empirical Frequentist Mean"),
    ("avg_post_var_times_n", "Average of Posterior Variances (×n)"),
    ("empirical_freq_var_times_n", "Empirical Frequentist Variance (×n)"),
    ("avg_sandwich", "Average Sandwich Estimate"),
    ("avg_ci", "Average Bayesian credible interval"),
    ("freq_ci", "Frequentist confidence interval (pooled)"),
    ("coverage_pct", "Posterior Coverage"),
)

CSV_STATISTICS = (
    "avg_post_mean", "empirical_freq_mean", "avg_post_var_times_n", "empirical_freq_var_times_n",
    "avg_sandwich", "avg_ci_lo", "avg_ci_hi", "freq_ci_lo", "freq_ci_hi", "coverage_pct",
)


def _fmt(v):
    if v is None:
        return "NA"
    return f"{v:.6g}"


def _cell(table: StudyTable, key: str, k: int) -> str:
    v = getattr(table, key)[k]
    if key in ("avg_ci", "freq_ci"):
        return f"({_fmt(v[0])}, {_fmt(v[1])})"
    return _fmt(v)


def render_markdown(columns) -> str:
    """``columns`` is a list of ``(header, table, coordinate_index)``."""
    lines = ["| | " + " | ".join(h for h, _, _ in columns) + " |",
             "|---|" + "---:|" * len(columns)]
    for key, label in ROW_LABELS:
        lines.append(f"| {label} | " + " | ".join(_cell(t, key, k) for _, t, k in columns) + " |")
    return "\n".join(lines) + "\n"


def _csv_value(table, stat, k):
    if stat.endswith(("_lo", "_hi")):
        base, side = stat[:-3], stat[-2:]
        return getattr(table, base)[k][0 if side == "lo" else 1]
    return getattr(table, stat)[k]


def emit_table(t: StudyTable, format: str = "markdown") -> str:
    if format == "json":
        return json.dumps(t.to_dict(), sort_keys=True)
    if format == "markdown":
        return render_markdown([(name, t, k) for k, name in enumerate(t.names)])
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["statistic"] + list(t.names))
        for stat in CSV_STATISTICS:
            writer.writerow([stat] + [_fmt(_csv_value(t, stat, k)) for k in range(len(t.names))])
        return buf.getvalue()
    raise ValueError(f"unknown table format {format!r}")


def merge_tables(tables) -> str:
    """One markdown table with a column per study, ordered by n.

    Columns sharing the same n get ``#2``, ``#3`` suffixes in input order.
    """
    order = sorted(range(len(tables)), key=lambda i: tables[i].n)
    seen: dict = {}
    columns = []
    for i in order:
        t = tables[i]
        seen[t.n] = seen.get(t.n, 0) + 1
        suffix = "" if seen[t.n] == 1 else f" #{seen[t.n]}"
        for k, name in enumerate(t.names):
            coord = "" if len(t.names) == 1 else f" {name}"
            columns.append((f"n={t.n}{suffix}{coord}", t, k))
    return render_markdown(columns)


def write_draws_csv(draws: PosteriorDraws, path) -> None:
    p = draws.theta_draws.shape[1]
    q = 0 if draws.h_draws is None else draws.h_draws.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["draw_id"] + [f"theta_{k + 1}" for k in range(p)] + [f"h_{k + 1}" for k in range(q)])
        for j in range(draws.B):
            row = [j] + [repr(float(v)) for v in draws.theta_draws[j]]
            if q:
                row += [repr(float(v)) for v in draws.h_draws[j]]
            writer.writerow(row)


def study_json(result: StudyResult) -> str:
    return json.dumps(result.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_study_outputs(result: StudyResult, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "study.json").write_text(study_json(result), encoding="utf-8")
    (outdir / "table.md").write_text(emit_table(result.table, "markdown"), encoding="utf-8")
    for rep in result.replicates:
        if rep.draws is not None:
            write_draws_csv(rep.draws, outdir / f"rep{rep.replicate_id}_draws.csv")
    return outdir
