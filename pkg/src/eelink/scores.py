"""Built-in estimating systems for the causal targets.

Every system pairs a target score ``m`` with the logistic propensity score
``u(O; h) = x (z - e(x; h))`` as nuisance equation. Coefficient vectors are
in the coordinates of ``Dataset.design(intercept)``.
"""

from __future__ import annotations

import numpy as np

from .estimators import (
    PropensityModel,
    att_estimate,
    expit,
    fit_logistic_weighted,
    g_estimate,
    ipw_estimate,
    psreg_estimate,
)
from .model import AnalyticDerivatives, EstimandSpec

KINDS = ("gest", "ipw", "att", "psreg")


def _e(d, h, intercept):
    return expit(d.design(intercept) @ h)


def _u(intercept):
    def u(d, h):
        X = d.design(intercept)
        return X * (d.z - expit(X @ h))[:, None]

    def du_dh(d, h):
        X = d.design(intercept)
        e = expit(X @ h)
        return -np.einsum("i,ij,ik->ijk", e * (1.0 - e), X, X)

    return u, du_dh


def gest_spec(q: int, intercept: bool = True) -> EstimandSpec:
    """G-estimation score ``(y - theta z)(z - e)``."""
    u, du_dh = _u(intercept)

    def m(d, theta, h):
        return ((d.y - theta[0] * d.z) * (d.z - _e(d, h, intercept)))[:, None]

    def dm_dtheta(d, theta, h):
        return (-d.z * (d.z - _e(d, h, intercept)))[:, None, None]

    def dm_dh(d, theta, h):
        e = _e(d, h, intercept)
        coef = -(d.y - theta[0] * d.z) * e * (1.0 - e)
        return (d.design(intercept) * coef[:, None])[:, None, :]

    return EstimandSpec(
        kind="gest", p=1, q_nuis=q + int(intercept), target_score=m, nuisance_score=u,
        analytic_derivatives=AnalyticDerivatives(dm_dtheta, dm_dh, du_dh),
        intercept=intercept,
        fit_nuisance=lambda d, w: fit_logistic_weighted(d, w, intercept),
        closed_form=lambda d, w, h, eps: g_estimate(d, w, PropensityModel(h, intercept)),
        names=("ate",),
    )


def ipw_spec(q: int, intercept: bool = True) -> EstimandSpec:
    """IPW moment ``theta - {z y / e - (1 - z) y / (1 - e)}``."""
    u, du_dh = _u(intercept)

    def m(d, theta, h):
        e = _e(d, h, intercept)
        return (theta[0] - (d.z * d.y / e - (1 - d.z) * d.y / (1.0 - e)))[:, None]

    def dm_dtheta(d, theta, h):
        return np.ones((d.n, 1, 1))

    def dm_dh(d, theta, h):
        e = _e(d, h, intercept)
        coef = d.z * d.y * (1.0 - e) / e + (1 - d.z) * d.y * e / (1.0 - e)
        return (d.design(intercept) * coef[:, None])[:, None, :]

    return EstimandSpec(
        kind="ipw", p=1, q_nuis=q + int(intercept), target_score=m, nuisance_score=u,
        analytic_derivatives=AnalyticDerivatives(dm_dtheta, dm_dh, du_dh),
        intercept=intercept,
        fit_nuisance=lambda d, w: fit_logistic_weighted(d, w, intercept),
        closed_form=lambda d, w, h, eps: ipw_estimate(d, w, PropensityModel(h, intercept), eps),
        names=("ate",),
    )


def att_spec(q: int, intercept: bool = True) -> EstimandSpec:
    """ATT score ``z y - y (1 - z) e / (1 - e) - rho z``."""
    u, du_dh = _u(intercept)

    def m(d, theta, h):
        e = _e(d, h, intercept)
        return (d.z * d.y - d.y * (1 - d.z) * e / (1.0 - e) - theta[0] * d.z)[:, None]

    def dm_dtheta(d, theta, h):
        return (-d.z.astype(float))[:, None, None]

    def dm_dh(d, theta, h):
        e = _e(d, h, intercept)
        coef = -d.y * (1 - d.z) * e / (1.0 - e)
        return (d.design(intercept) * coef[:, None])[:, None, :]

    return EstimandSpec(
        kind="att", p=1, q_nuis=q + int(intercept), target_score=m, nuisance_score=u,
        analytic_derivatives=AnalyticDerivatives(dm_dtheta, dm_dh, du_dh),
        intercept=intercept,
        fit_nuisance=lambda d, w: fit_logistic_weighted(d, w, intercept),
        closed_form=lambda d, w, h, eps: att_estimate(d, w, PropensityModel(h, intercept), eps),
        names=("att",),
    )


def psreg_spec(q: int, intercept: bool = True) -> EstimandSpec:
    """Propensity-score regression: normal equations of y on (z, e)."""
    u, du_dh = _u(intercept)

    def m(d, theta, h):
        e = _e(d, h, intercept)
        r = d.y - theta[0] * d.z - theta[1] * e
        return np.column_stack([r * d.z, r * e])

    def dm_dtheta(d, theta, h):
        e = _e(d, h, intercept)
        z = d.z.astype(float)
        out = np.empty((d.n, 2, 2))
        out[:, 0, 0] = -z * z
        out[:, 0, 1] = -z * e
        out[:, 1, 0] = -e * z
        out[:, 1, 1] = -e * e
        return out

    def dm_dh(d, theta, h):
        X = d.design(intercept)
        e = _e(d, h, intercept)
        de = e * (1.0 - e)
        r = d.y - theta[0] * d.z - theta[1] * e
        c1 = -theta[1] * d.z * de
        c2 = (r - theta[1] * e) * de
        return np.stack([X * c1[:, None], X * c2[:, None]], axis=1)

    def closed(d, w, h, eps):
        fit = psreg_estimate(d, w, PropensityModel(h, intercept))
        return np.array([fit.theta, fit.phi])

    return EstimandSpec(
        kind="psreg", p=2, q_nuis=q + int(intercept), target_score=m, nuisance_score=u,
        analytic_derivatives=AnalyticDerivatives(dm_dtheta, dm_dh, du_dh),
        intercept=intercept,
        fit_nuisance=lambda d, w: fit_logistic_weighted(d, w, intercept),
        closed_form=closed,
        names=("theta", "phi"),
    )


_BUILDERS = {"gest": gest_spec, "ipw": ipw_spec, "att": att_spec, "psreg": psreg_spec}


def make_spec(kind: str, q: int, intercept: bool = True) -> EstimandSpec:
    try:
        return _BUILDERS[kind](q, intercept)
    except KeyError:
        raise ValueError(f"unknown estimand {kind!r}; expected one of {', '.join(KINDS)}") from None


def strip_fast_paths(spec: EstimandSpec) -> EstimandSpec:
    """Same system without closed forms or analytic derivatives.

    Forces every solve through the generic Newton / finite-difference
    routes; used to cross-check the built-in fast paths.
    """
    from dataclasses import replace

    return replace(spec, kind="custom", analytic_derivatives=None, fit_nuisance=None, closed_form=None)


def mean_spec() -> EstimandSpec:
    """The mean functional ``m(O; theta) = y - theta`` with no nuisance."""
    return EstimandSpec(
        kind="custom", p=1, q_nuis=0,
        target_score=lambda d, theta, h: (d.y - theta[0])[:, None],
        analytic_derivatives=AnalyticDerivatives(lambda d, theta, h: -np.ones((d.n, 1, 1))),
        names=("mean",),
    )
