"""Bayesian-bootstrap posterior samplers.

* :func:`bb_posterior_known_h` - nuisance fixed at a known value.
* :func:`bb_posterior_plugin` - nuisance estimated once, then held fixed.
* :func:`bb_posterior_linked` - each draw re-solves the nuisance equation
  with the same Dirichlet weights used for the target equation.
* :func:`bb_posterior_augmented` - each draw solves the stacked system
  ``sum_i w_i (m_i; u_i) = 0`` jointly in ``(theta, h)``.
* :func:`llb_posterior` - weighted loss minimisation.

Draw ``j`` of replicate ``r`` takes its weights from the substream
``(seed, r, j, WEIGHTS)``. If a solve fails (separation, overlap, a
singular Jacobian) the draw is redone on fresh weights from
``(seed, r, j, RETRY, k)`` for ``k = 1..max_retries``; the number of
retries is reported and draws are never silently dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DrawFailed, OverlapViolation, SolverError
from .estimators import (
    DEFAULT_EPSILON,
    Loss,
    logistic_loss,
    minimize_weighted_loss,
    newton_root,
    fd_jacobian,
    solve_target,
    solve_weighted_nuisance,
)
from .model import Dataset, EstimandSpec, PosteriorDraws, WeightVector, as_weights, require_valid
from .rng import MAX_SEED, Purpose, StreamKey, dirichlet_weights, equal_weights

logger = logging.getLogger(__name__)

WeightSource = Callable[[int, StreamKey], WeightVector]

PLUGIN_KINDS = ("true_h", "freq_logistic", "llb_mean")


@dataclass(frozen=True)
class PluginMethod:
    kind: str
    intercept: bool = True
    llb_draws: int = 500

    def __post_init__(self):
        if self.kind not in PLUGIN_KINDS:
            raise ValueError(f"unknown plugin kind {self.kind!r}; expected one of {', '.join(PLUGIN_KINDS)}")
        if self.kind == "llb_mean" and self.llb_draws < 1:
            raise ValueError("llb_draws must be at least 1")


@dataclass(frozen=True)
class EngineConfig:
    B: int
    seed: int
    max_retries: int = 5
    epsilon_overlap: float = DEFAULT_EPSILON
    replicate_id: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0 <= self.seed <= MAX_SEED:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


def _run_draws(n, cfg: EngineConfig, solve_one, weight_source, purpose=Purpose.WEIGHTS):
    source = weight_source or dirichlet_weights
    out = []
    retries = 0
    for j in range(cfg.B):
        key = StreamKey(cfg.seed, cfg.replicate_id, j, purpose)
        last = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                retries += 1
            w = source(n, key if attempt == 0 else key.retry(attempt))
            try:
                out.append(solve_one(w))
                break
            except SolverError as exc:
                if isinstance(exc, OverlapViolation):
                    logger.warning("draw %d attempt %d: %s (no trimming applied)", j, attempt, exc)
                last = exc
        else:
            raise DrawFailed(j, cfg.max_retries + 1, last)
    return out, retries


def _check_h(spec, h):
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (spec.q_nuis,):
        raise ValueError(f"nuisance has length {h.size}, spec expects {spec.q_nuis}")
    return h


def known_h_solver(spec: EstimandSpec, d: Dataset, h, epsilon=DEFAULT_EPSILON):
    return lambda w: solve_target(spec, d, w, h, epsilon=epsilon)


def linked_solver(spec: EstimandSpec, d: Dataset, epsilon=DEFAULT_EPSILON):
    """One linked draw: nuisance and target solved on the same weights."""

    def solve(w):
        fit = solve_weighted_nuisance(spec, d, w)
        theta = solve_target(spec, d, w, fit.h, epsilon=epsilon)
        return theta, fit.h

    return solve


def stacked_residual(spec: EstimandSpec, d: Dataset, w, eta):
    eta = np.asarray(eta, dtype=float)
    p = spec.p
    theta, h = eta[:p], eta[p:]
    return np.concatenate([w @ spec.m(d, theta, h), w @ spec.u(d, h)])


def _stacked_jacobian(spec, d, w):
    p, q = spec.p, spec.q_nuis
    deriv = spec.analytic_derivatives
    if deriv is None or deriv.dm_dh is None or deriv.du_dh is None:
        return lambda eta: fd_jacobian(lambda e: stacked_residual(spec, d, w, e), eta)

    def jac(eta):
        theta, h = eta[:p], eta[p:]
        J = np.zeros((p + q, p + q))
        J[:p, :p] = np.einsum("i,ijk->jk", w, deriv.dm_dtheta(d, theta, h))
        J[:p, p:] = np.einsum("i,ijk->jk", w, deriv.dm_dh(d, theta, h))
        J[p:, p:] = np.einsum("i,ijk->jk", w, deriv.du_dh(d, h))
        return J

    return jac


def augmented_solver(spec: EstimandSpec, d: Dataset, epsilon=DEFAULT_EPSILON):
    """One draw of the stacked system.

    The triangular structure (u does not involve theta) gives a starting
    point from the sequential solve; a joint Newton iteration on the
    stacked residual then certifies (or polishes) the joint root.
    """
    linked = linked_solver(spec, d, epsilon)

    def solve(w):
        w = as_weights(w)
        theta, h = linked(w)
        eta0 = np.concatenate([theta, h])
        eta = newton_root(lambda e: stacked_residual(spec, d, w, e), _stacked_jacobian(spec, d, w),
                          eta0, what="stacked system")
        return eta[: spec.p], eta[spec.p:]

    return solve


def bb_posterior_known_h(spec: EstimandSpec, d: Dataset, h0, cfg: EngineConfig,
                         weight_source: Optional[WeightSource] = None) -> PosteriorDraws:
    require_valid(d)
    h0 = _check_h(spec, h0) if spec.q_nuis else None
    draws, retries = _run_draws(d.n, cfg, known_h_solver(spec, d, h0, cfg.epsilon_overlap), weight_source)
    return PosteriorDraws(np.array(draws), method="known_h", seed=cfg.seed, retries_total=retries)


def plugin_nuisance(spec: EstimandSpec, d: Dataset, plugin: PluginMethod, cfg: EngineConfig, h0=None):
    """The fixed nuisance estimate of the plug-in method, and retries spent on it."""
    if plugin.kind == "true_h":
        if h0 is None:
            raise ValueError("plugin kind true_h requires h0")
        return _check_h(spec, h0), 0
    if spec.intercept != plugin.intercept:
        raise ValueError("spec.intercept must match plugin.intercept")
    if plugin.kind == "freq_logistic":
        return solve_weighted_nuisance(spec, d, equal_weights(d.n)).h, 0
    if spec.kind == "custom":
        raise ValueError("llb_mean plug-in needs the logistic nuisance of a built-in spec")
    loss = logistic_loss(d.q, spec.intercept)
    llb_cfg = EngineConfig(B=plugin.llb_draws, seed=cfg.seed, max_retries=cfg.max_retries,
                           epsilon_overlap=cfg.epsilon_overlap, replicate_id=cfg.replicate_id)
    post = llb_posterior(loss, d, llb_cfg, purpose=Purpose.NUISANCE)
    return post.theta_draws.mean(axis=0), post.retries_total


def bb_posterior_plugin(spec: EstimandSpec, d: Dataset, plugin: PluginMethod, cfg: EngineConfig, *,
                        h0=None, weight_source: Optional[WeightSource] = None,
                        nuisance_estimate=None) -> PosteriorDraws:
    """Estimate the nuisance once (true value, logistic MLE, or mean of a
    loss-likelihood bootstrap posterior), then bootstrap the target with it
    held fixed.

    The first-stage nuisance posterior of ``llb_mean`` uses the
    ``NUISANCE`` substreams so it is independent of the target weights.
    ``nuisance_estimate`` accepts a precomputed ``plugin_nuisance`` result.
    """
    require_valid(d)
    if nuisance_estimate is None:
        nuisance_estimate = plugin_nuisance(spec, d, plugin, cfg, h0)
    h_hat, pre_retries = nuisance_estimate
    draws, retries = _run_draws(d.n, cfg, known_h_solver(spec, d, h_hat, cfg.epsilon_overlap), weight_source)
    return PosteriorDraws(np.array(draws), method="plugin", seed=cfg.seed, retries_total=retries + pre_retries)


def _joint(method, solver, d, cfg, weight_source):
    require_valid(d)
    draws, retries = _run_draws(d.n, cfg, solver, weight_source)
    theta = np.array([t for t, _ in draws])
    h = np.array([hh for _, hh in draws])
    return PosteriorDraws(theta, method=method, seed=cfg.seed, h_draws=h, retries_total=retries)


def bb_posterior_linked(spec: EstimandSpec, d: Dataset, cfg: EngineConfig,
                        weight_source: Optional[WeightSource] = None) -> PosteriorDraws:
    return _joint("linked", linked_solver(spec, d, cfg.epsilon_overlap), d, cfg, weight_source)


def bb_posterior_augmented(spec: EstimandSpec, d: Dataset, cfg: EngineConfig,
                           weight_source: Optional[WeightSource] = None) -> PosteriorDraws:
    return _joint("augmented", augmented_solver(spec, d, cfg.epsilon_overlap), d, cfg, weight_source)


def llb_posterior(loss: Loss, d: Dataset, cfg: EngineConfig, *, init=None,
                  weight_source: Optional[WeightSource] = None, purpose=Purpose.WEIGHTS) -> PosteriorDraws:
    draws, retries = _run_draws(
        d.n, cfg, lambda w: minimize_weighted_loss(loss, d, w, init), weight_source, purpose
    )
    return PosteriorDraws(np.array(draws), method="llb", seed=cfg.seed, retries_total=retries)
