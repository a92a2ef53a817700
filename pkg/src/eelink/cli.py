"""The ``eelink`` command line.

Exit codes: 0 success, 2 invalid input or config, 3 solver failure,
4 study failure tolerance exceeded.

Settings resolve as explicit flag > config file > default. The worker
count additionally consults ``EELINK_WORKERS`` between the flag and the
config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

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
from .errors import (
    ConfigError,
    DataValidationError,
    DrawFailed,
    ParseError,
    ReplicateFailed,
    SolverError,
    StudyFailure,
    ValidationError,
)
from .model import read_dataset_csv, require_valid, write_dataset_csv
from .rng import Purpose, StreamKey, derive_stream, equal_weights
from .sandwich import sandwich_linked
from .scores import KINDS, make_spec
from .study import (
    METHODS,
    StudyConfig,
    StudyTable,
    emit_table,
    merge_tables,
    run_study,
    summarize_posterior,
    write_draws_csv,
    write_study_outputs,
)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_STUDY = 0, 2, 3, 4
WORKERS_ENV = "EELINK_WORKERS"

CONFIG_DEFAULTS = {
    "replicates": 200,
    "B": 500,
    "quantiles": (0.025, 0.975),
    "intercept": True,
    "workers": None,
}
REQUIRED_FIELDS = ("design", "estimand", "method", "seed")
CONFIG_FIELDS = frozenset(
    ("design", "estimand", "method", "plugin", "n", "replicates", "B", "seed", "intercept",
     "quantiles", "workers", "theta0", "max_retries", "epsilon_overlap")
)
_INT_FIELDS = ("n", "replicates", "B", "seed", "max_retries")
_REAL_FIELDS = ("theta0", "epsilon_overlap")


# -- configuration ---------------------------------------------------------


def load_config_document(path) -> dict:
    """Read a YAML mapping, raising :class:`ParseError` with line context."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ParseError(f"{where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be a mapping of config fields")
    return doc


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce_plugin(raw):
    if raw is None:
        return None
    if isinstance(raw, PluginMethod):
        return raw
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        raise ValidationError("plugin", "must be a kind name or a mapping with kind/intercept/llb_draws")
    unknown = set(raw) - {"kind", "intercept", "llb_draws"}
    if unknown:
        raise ValidationError("plugin", f"unknown keys {sorted(unknown)}")
    if "kind" not in raw:
        raise ValidationError("plugin", "kind is required")
    if "intercept" in raw and not isinstance(raw["intercept"], bool):
        raise ValidationError("plugin", "intercept must be true or false")
    if "llb_draws" in raw and not _is_int(raw["llb_draws"]):
        raise ValidationError("plugin", "llb_draws must be an integer")
    try:
        return PluginMethod(**raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError("plugin", str(exc)) from exc


def build_config(raw: dict, overrides: dict | None = None) -> StudyConfig:
    """Validate a flat mapping of config fields; ``overrides`` (non-None values) win."""
    merged = {**CONFIG_DEFAULTS, **raw}
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    unknown = sorted(set(merged) - CONFIG_FIELDS)
    if unknown:
        raise ValidationError(unknown[0], "unknown config field")
    for name in REQUIRED_FIELDS:
        if merged.get(name) is None:
            raise ValidationError(name, "required")
    for name in _INT_FIELDS:
        if merged.get(name) is not None and not _is_int(merged[name]):
            raise ValidationError(name, "must be an integer")
    for name in _REAL_FIELDS:
        if merged.get(name) is not None and not _is_real(merged[name]):
            raise ValidationError(name, "must be a number")
    for name in ("design", "estimand", "method"):
        if not isinstance(merged[name], str):
            raise ValidationError(name, "must be a string")
    if not isinstance(merged["intercept"], bool):
        raise ValidationError("intercept", "must be true or false")
    w = merged["workers"]
    if w == "auto":
        merged["workers"] = None
    elif w is not None and not _is_int(w):
        raise ValidationError("workers", "must be an integer or auto")
    q = merged["quantiles"]
    if not isinstance(q, (list, tuple)) or len(q) != 2 or not all(_is_real(v) for v in q):
        raise ValidationError("quantiles", "must be a pair of numbers")
    merged["plugin"] = _coerce_plugin(merged.get("plugin"))
    return StudyConfig(**merged)


def parse_config(path, overrides: dict | None = None) -> StudyConfig:
    return build_config(load_config_document(path), overrides)


def _env_workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return None
    if raw.strip() == "auto":
        return "auto"
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError("workers", f"{WORKERS_ENV}={raw!r} is not an integer") from None
    return value


def resolve_workers_setting(flag, config_value):
    """flag > EELINK_WORKERS > config > auto (``None``)."""
    for candidate in (flag, _env_workers(), config_value):
        if candidate is not None:
            return None if candidate == "auto" else candidate
    return None


# -- argument parsing ------------------------------------------------------


def _workers_arg(text):
    if text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or auto") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _seed_arg(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a non-negative integer") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("must be a 64-bit unsigned integer")
    return value


def _vector_arg(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


def _shared(parser, *, out_help):
    parser.add_argument("--seed", type=_seed_arg, help="master seed (u64)")
    parser.add_argument("--out", help=out_help)
    parser.add_argument("--workers", type=_workers_arg, help=f"worker processes or auto (env {WORKERS_ENV})")
    parser.add_argument("--B", type=int, dest="B", help="bootstrap draws")
    parser.add_argument("--config", help="YAML config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eelink", description="Linked Bayesian bootstrap for estimating equations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", help="simulate one dataset from a built-in design")
    _shared(p, out_help="dataset CSV path (a .truth.json sidecar is written next to it)")
    p.add_argument("--design", choices=sorted(dgp.DESIGNS))
    p.add_argument("--n", type=int)
    p.add_argument("--replicate", type=int, default=0, help="replicate substream (default 0)")

    p = sub.add_parser("posterior", help="posterior draws for a dataset CSV")
    _shared(p, out_help="output directory for draws.csv and summary.json (default .)")
    p.add_argument("dataset")
    p.add_argument("--estimand", choices=KINDS)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--plugin", choices=("true_h", "freq_logistic", "llb_mean"), help="plug-in nuisance estimate")
    p.add_argument("--plugin-no-intercept", action="store_true", help="fit the plug-in nuisance without intercept")
    p.add_argument("--llb-draws", type=int, help="draws for the llb_mean plug-in")
    p.add_argument("--h0", type=_vector_arg, help="known nuisance (comma-separated), for known/true_h")
    p.add_argument("--no-intercept", action="store_true", help="nuisance model without intercept")
    p.add_argument("--quantiles", type=_vector_arg, help="credible-interval levels, e.g. 0.025,0.975")
    p.add_argument("--theta0", type=float, help="report whether the interval covers this value")

    p = sub.add_parser("variance", help="sandwich variance blocks for a dataset CSV")
    _shared(p, out_help="JSON output file (default: standard output)")
    p.add_argument("dataset")
    p.add_argument("--estimand", choices=KINDS)
    p.add_argument("--no-intercept", action="store_true")

    p = sub.add_parser("simulate", help="run a replicated simulation study")
    _shared(p, out_help="output directory (default .)")
    p.add_argument("--n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--save-draws", action="store_true", help="also write rep<k>_draws.csv files")

    p = sub.add_parser("tables", help="merge study.json files into one markdown table")
    _shared(p, out_help="markdown output file (default: standard output)")
    p.add_argument("studies", nargs="+")
    return parser


# -- helpers ---------------------------------------------------------------


def _config_doc(args):
    return load_config_document(args.config) if getattr(args, "config", None) else {}


def _pick(flag, doc, key, default=None):
    if flag is not None:
        return flag
    return doc.get(key, default)


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _load_dataset(path):
    return require_valid(read_dataset_csv(path))


# -- subcommands -----------------------------------------------------------


def cmd_gen(args) -> int:
    doc = _config_doc(args)
    design = _pick(args.design, doc, "design")
    n = _pick(args.n, doc, "n")
    seed = _pick(args.seed, doc, "seed")
    out = args.out or "data.csv"
    if design not in dgp.DESIGNS:
        raise ValidationError("design", f"must be one of {', '.join(dgp.DESIGNS)}")
    if not _is_int(n) or n < 2:
        raise ValidationError("n", "must be an integer >= 2")
    if not _is_int(seed):
        raise ValidationError("seed", "required")
    stream = derive_stream(StreamKey(seed, args.replicate, 0, Purpose.DATA))
    d, truth = dgp.generate(design, n, stream)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(d, out)
    _dump_json({"design": design, "n": n, "seed": seed, "replicate": args.replicate,
                "theta0": truth.theta0, "h0": truth.h0.tolist()}, out.with_suffix(".truth.json"))
    return EXIT_OK


def cmd_posterior(args) -> int:
    doc = _config_doc(args)
    estimand = _pick(args.estimand, doc, "estimand")
    method = _pick(args.method, doc, "method")
    seed = _pick(args.seed, doc, "seed", 0)
    B = _pick(args.B, doc, "B", CONFIG_DEFAULTS["B"])
    intercept = False if args.no_intercept else doc.get("intercept", True)
    quantiles = tuple(_pick(args.quantiles, doc, "quantiles", CONFIG_DEFAULTS["quantiles"]))
    theta0 = _pick(args.theta0, doc, "theta0")
    if estimand not in KINDS:
        raise ValidationError("estimand", f"must be one of {', '.join(KINDS)}")
    if method not in METHODS:
        raise ValidationError("method", f"must be one of {', '.join(METHODS)}")
    if not _is_int(B) or B < 2:
        raise ValidationError("B", "must be an integer >= 2")
    if len(quantiles) != 2 or not 0 < quantiles[0] < quantiles[1] < 1:
        raise ValidationError("quantiles", "quantiles must increase strictly within (0, 1)")
    plugin = None
    if method == "plugin":
        raw = dict(doc.get("plugin") or {}) if isinstance(doc.get("plugin"), dict) else (
            {"kind": doc["plugin"]} if doc.get("plugin") else {})
        if args.plugin:
            raw["kind"] = args.plugin
        if args.plugin_no_intercept:
            raw["intercept"] = False
        if args.llb_draws is not None:
            raw["llb_draws"] = args.llb_draws
        if not raw:
            raise ValidationError("plugin", "plugin required when method is plugin")
        plugin = _coerce_plugin(raw)

    d = _load_dataset(args.dataset)
    eps = float(doc.get("epsilon_overlap", 1e-6))
    ecfg = EngineConfig(B=B, seed=seed, max_retries=int(doc.get("max_retries", 5)), epsilon_overlap=eps)
    linked_spec = make_spec(estimand, d.q, intercept)
    ew = equal_weights(d.n)
    theta_n, h_n = linked_solver(linked_spec, d, eps)(ew)

    def known_h(spec):
        if args.h0 is None:
            raise ValidationError("h0", f"--h0 with {spec.q_nuis} values required")
        h = np.asarray(args.h0, dtype=float)
        if h.size != spec.q_nuis:
            raise ValidationError("h0", f"expected {spec.q_nuis} values, got {h.size}")
        return h

    if method == "linked":
        point, draws = theta_n, bb_posterior_linked(linked_spec, d, ecfg)
    elif method == "augmented":
        point = augmented_solver(linked_spec, d, eps)(ew)[0]
        draws = bb_posterior_augmented(linked_spec, d, ecfg)
    elif method == "known":
        h0 = known_h(linked_spec)
        point = known_h_solver(linked_spec, d, h0, eps)(ew)
        draws = bb_posterior_known_h(linked_spec, d, h0, ecfg)
    else:
        spec = make_spec(estimand, d.q, plugin.intercept)
        h0 = known_h(spec) if plugin.kind == "true_h" else None
        est = plugin_nuisance(spec, d, plugin, ecfg, h0)
        point = known_h_solver(spec, d, est[0], eps)(ew)
        draws = bb_posterior_plugin(spec, d, plugin, ecfg, nuisance_estimate=est)

    V = sandwich_linked(linked_spec, d, theta_n, h_n).V
    targets = [theta0] + [None] * (linked_spec.p - 1)
    s = summarize_posterior(draws, targets, quantiles)
    outdir = Path(args.out or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    write_draws_csv(draws, outdir / "draws.csv")
    config = {
        "dataset": str(args.dataset), "estimand": estimand, "method": method, "B": B, "seed": seed,
        "intercept": intercept, "quantiles": list(quantiles), "epsilon_overlap": eps,
        "max_retries": ecfg.max_retries, "theta0": theta0,
        "plugin": None if plugin is None else {"kind": plugin.kind, "intercept": plugin.intercept,
                                               "llb_draws": plugin.llb_draws},
        "h0": args.h0,
    }
    summary = {
        "method": method, "estimand": estimand, "n": d.n, "B": B, "seed": seed,
        "names": list(linked_spec.names),
        "point_estimate": np.atleast_1d(point).tolist(),
        "posterior_mean": s.mean,
        "posterior_variance": s.var,
        "posterior_variance_times_n": [v * d.n for v in s.var],
        "ci_lo": s.ci_lo, "ci_hi": s.ci_hi, "covered": s.covered,
        "sandwich_V": V.tolist(),
        "retries_total": draws.retries_total,
        "config": config,
    }
    _dump_json(summary, outdir / "summary.json")
    return EXIT_OK


def cmd_variance(args) -> int:
    doc = _config_doc(args)
    estimand = _pick(args.estimand, doc, "estimand")
    if estimand not in KINDS:
        raise ValidationError("estimand", f"must be one of {', '.join(KINDS)}")
    intercept = False if args.no_intercept else doc.get("intercept", True)
    d = _load_dataset(args.dataset)
    spec = make_spec(estimand, d.q, intercept)
    theta, h = linked_solver(spec, d, float(doc.get("epsilon_overlap", 1e-6)))(equal_weights(d.n))
    est = sandwich_linked(spec, d, theta, h)
    out = est.to_dict()
    out.update(estimand=estimand, intercept=intercept, theta_hat=theta.tolist(), h_hat=h.tolist())
    _dump_json(out, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not args.config:
        raise ValidationError("config", "simulate needs --config")
    doc = load_config_document(args.config)
    overrides = {"seed": args.seed, "B": args.B, "n": args.n, "replicates": args.replicates}
    cfg = build_config(doc, overrides)
    workers = resolve_workers_setting(args.workers, doc.get("workers"))
    if workers is not None and (not _is_int(workers) or workers < 1):
        raise ValidationError("workers", "must be a positive integer or auto")
    result = run_study(cfg, workers=workers, keep_draws=args.save_draws)
    write_study_outputs(result, args.out or ".")
    sys.stdout.write(emit_table(result.table, "markdown"))
    if result.failures:
        print(f"{len(result.failures)} replicate(s) failed and were excluded", file=sys.stderr)
    return EXIT_OK


def _read_study_table(path) -> StudyTable:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return StudyTable.from_dict(obj["table"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError("studies", f"{path} is not a study.json ({exc})") from exc


def cmd_tables(args) -> int:
    tables = [_read_study_table(p) for p in args.studies]
    if len({tuple(t.names) for t in tables}) > 1:
        raise ValidationError("studies", "studies report different target coordinates")
    text = merge_tables(tables)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "posterior": cmd_posterior, "variance": cmd_variance,
            "simulate": cmd_simulate, "tables": cmd_tables}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.subcommand](args)
    except (DataValidationError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"eelink: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StudyFailure as exc:
        print(f"eelink: error: {exc}", file=sys.stderr)
        return EXIT_STUDY
    except (SolverError, DrawFailed, ReplicateFailed) as exc:
        print(f"eelink: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
