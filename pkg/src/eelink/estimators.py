"""Weighted point estimators.

All estimators take a weight vector on the simplex; ``equal_weights(n)``
recovers the ordinary frequentist estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .errors import NotIdentified, OverlapViolation, SingularJacobian, SolverDiverged
from .model import Dataset, EstimandSpec, NuisanceFit, as_weights

logger = logging.getLogger(__name__)

LOGISTIC_TOL = 1e-10
EE_TOL = 1e-10
LOSS_TOL = 1e-8
RCOND_MIN = 1e-10
DEFAULT_EPSILON = 1e-6
MAX_HALVINGS = 30


def expit(t):
    """Logistic function, evaluated on the branch that cannot overflow."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    neg = t < 0
    et = np.exp(t[neg])
    out[neg] = et / (1.0 + et)
    out[~neg] = 1.0 / (1.0 + np.exp(-t[~neg]))
    return out


@dataclass(frozen=True)
class PropensityModel:
    h: NDArray[np.float64]
    intercept: bool = False

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if not np.all(np.isfinite(h)):
            raise ValueError("propensity coefficients must be finite")
        object.__setattr__(self, "h", h)

    def scores(self, d: Dataset) -> NDArray[np.float64]:
        return propensity_scores(d, self.h, self.intercept)


@dataclass(frozen=True)
class PsRegFit:
    theta: float
    phi: float


def propensity(x, model: PropensityModel) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if model.intercept:
        x = np.concatenate([[1.0], x])
    if x.shape != model.h.shape:
        raise ValueError(f"covariate length {x.shape[0]} does not match h length {model.h.shape[0]}")
    return float(expit(np.dot(model.h, x)))


def propensity_scores(d: Dataset, h, intercept: bool) -> NDArray[np.float64]:
    return expit(d.design(intercept) @ np.asarray(h, dtype=float))


def _rcond_ok(a) -> bool:
    a = np.atleast_2d(a)
    if not np.all(np.isfinite(a)):
        return False
    s = np.linalg.svd(a, compute_uv=False)
    return s[0] > 0 and s[-1] / s[0] > RCOND_MIN


def fit_logistic_weighted(d: Dataset, w, intercept: bool, *, tol=LOGISTIC_TOL, max_iter=100) -> NuisanceFit:
    """Solve the weighted logistic score ``sum_i w_i x_i (z_i - e_i) = 0``.

    Newton-Raphson from ``h = 0`` with step halving whenever the score
    sup-norm fails to decrease.

    Raises
    ------
    SingularJacobian
        The weighted information matrix is numerically singular.
    SolverDiverged
        No convergence, a non-finite step, or quasi-separation: the score
        vanishes only because the fitted probabilities are being pushed to
        0/1, which shows up as a Newton step that does not shrink with the
        score at the "converged" point.
    """
    X = d.design(intercept)
    w = as_weights(w)
    z = d.z.astype(float)
    h = np.zeros(X.shape[1])

    def score_info(h):
        e = expit(X @ h)
        s = X.T @ (w * (z - e))
        return s, e

    s, e = score_info(h)
    norm = np.max(np.abs(s))
    for it in range(max_iter + 1):
        info = (X * (w * e * (1.0 - e))[:, None]).T @ X
        if not _rcond_ok(info):
            raise SingularJacobian("weighted logistic information matrix is singular")
        step = np.linalg.solve(info, s)
        if not np.all(np.isfinite(step)):
            raise SolverDiverged("non-finite Newton step in logistic fit")
        if norm <= tol:
            if np.max(np.abs(step)) > 1e-4 * (1.0 + np.max(np.abs(h))):
                raise SolverDiverged("quasi-separation: fitted probabilities degenerate at 0/1")
            # the final step is already computed; taking it squares the residual
            s_pol, _ = score_info(h + step)
            norm_pol = np.max(np.abs(s_pol))
            if norm_pol < norm:
                h, norm = h + step, norm_pol
            return NuisanceFit(h=h, iterations=it, score_sup_norm=float(norm), converged=True)
        if it == max_iter:
            break
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = h + t * step
            s_new, e_new = score_info(cand)
            norm_new = np.max(np.abs(s_new))
            if norm_new < norm:
                break
            t *= 0.5
        else:
            raise SolverDiverged("step halving failed to reduce the logistic score")
        h, s, e, norm = cand, s_new, e_new, norm_new
    raise SolverDiverged(f"logistic fit did not converge in {max_iter} iterations")


def _e(d, model):
    return model.scores(d)


def g_estimate(d: Dataset, w, model: PropensityModel) -> float:
    w = as_weights(w)
    resid = d.z - _e(d, model)
    den = np.dot(w, d.z * resid)
    if abs(den) <= 1e-12:
        raise NotIdentified("no usable treatment variation: sum w z (z - e) is zero")
    return float(np.dot(w, d.y * resid) / den)


def _check_overlap(e, eps, mask=None, upper_only=False):
    sel = e if mask is None else e[mask]
    bad = sel >= 1.0 - eps
    if not upper_only:
        bad |= sel <= eps
    if np.any(bad):
        raise OverlapViolation(
            f"{int(bad.sum())} propensity scores outside ({eps:g}, 1 - {eps:g})"
        )


def ipw_estimate(d: Dataset, w, model: PropensityModel, epsilon: float = DEFAULT_EPSILON) -> float:
    w = as_weights(w)
    e = _e(d, model)
    _check_overlap(e, epsilon)
    z, y = d.z, d.y
    return float(np.dot(w, z * y / e - (1 - z) * y / (1.0 - e)))


def att_estimate(d: Dataset, w, model: PropensityModel, epsilon: float = DEFAULT_EPSILON) -> float:
    w = as_weights(w)
    z, y = d.z, d.y
    treated = np.dot(w, z)
    if treated <= 1e-12:
        raise NotIdentified("no treated mass under the weighting")
    e = _e(d, model)
    _check_overlap(e, epsilon, mask=(z == 0), upper_only=True)
    odds = e / (1.0 - e)
    return float(np.dot(w, z * y - y * (1 - z) * odds) / treated)


def psreg_estimate(d: Dataset, w, model: PropensityModel) -> PsRegFit:
    """Weighted least squares of y on (z, e): both normal equations."""
    w = as_weights(w)
    e = _e(d, model)
    z, y = d.z.astype(float), d.y
    a11 = np.dot(w, z * z)
    a12 = np.dot(w, z * e)
    a22 = np.dot(w, e * e)
    b1 = np.dot(w, z * y)
    b2 = np.dot(w, e * y)
    det = a11 * a22 - a12 * a12
    if not abs(det) > 1e-10 * a11 * a22:
        raise NotIdentified("treatment and propensity score are collinear under the weighting")
    return PsRegFit(theta=float((a22 * b1 - a12 * b2) / det), phi=float((a11 * b2 - a12 * b1) / det))


# -- generic solvers --------------------------------------------------------


def fd_jacobian(fun, x, *, rel_step=1e-6):
    """Central-difference Jacobian of ``fun: R^k -> R^m`` at ``x`` (m x k)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    jac = np.empty((f0.size, x.size))
    for k in range(x.size):
        step = rel_step * (1.0 + abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += step
        xm[k] -= step
        jac[:, k] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * step)
    return jac


def newton_root(fun, jac, x0, *, tol=EE_TOL, max_iter=100, what="estimating equation"):
    """Newton iteration on ``fun(x) = 0`` with sup-norm step halving."""
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    g = np.atleast_1d(fun(x))
    if not np.all(np.isfinite(g)):
        raise SolverDiverged(f"{what}: non-finite value at the starting point")
    norm = np.max(np.abs(g)) if g.size else 0.0
    for _ in range(max_iter):
        if norm <= tol:
            return x
        J = np.atleast_2d(jac(x))
        if not _rcond_ok(J):
            raise SingularJacobian(f"{what}: Jacobian is numerically singular")
        step = np.linalg.solve(J, g)
        if not np.all(np.isfinite(step)):
            raise SolverDiverged(f"{what}: non-finite Newton step")
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = x - t * step
            g_new = np.atleast_1d(fun(cand))
            norm_new = np.max(np.abs(g_new)) if np.all(np.isfinite(g_new)) else np.inf
            if norm_new < norm:
                break
            t *= 0.5
        else:
            raise SolverDiverged(f"{what}: step halving failed to reduce the residual")
        x, g, norm = cand, g_new, norm_new
    if norm <= tol:
        return x
    raise SolverDiverged(f"{what}: no convergence in {max_iter} iterations")


def weighted_target_jacobian(spec: EstimandSpec, d, w, h):
    """``theta -> sum_i w_i dm_i/dtheta`` using the analytic form when present."""
    deriv = spec.analytic_derivatives
    if deriv is not None and deriv.dm_dtheta is not None:
        return lambda theta: np.einsum("i,ijk->jk", w, deriv.dm_dtheta(d, theta, h))
    return lambda theta: fd_jacobian(lambda t: w @ spec.m(d, t, h), theta)


def solve_weighted_ee(spec: EstimandSpec, d: Dataset, w, h=None, init=None):
    """Root of ``G(theta) = sum_i w_i m(O_i; theta, h)`` by Newton's method."""
    w = as_weights(w)
    theta0 = np.zeros(spec.p) if init is None else np.atleast_1d(np.asarray(init, dtype=float))
    return newton_root(
        lambda t: w @ spec.m(d, t, h),
        weighted_target_jacobian(spec, d, w, h),
        theta0,
        what=f"{spec.kind} target equation",
    )


def solve_weighted_nuisance(spec: EstimandSpec, d: Dataset, w) -> NuisanceFit:
    """Root of the weighted nuisance equation ``sum_i w_i u(O_i; h) = 0``."""
    w = as_weights(w)
    if spec.fit_nuisance is not None:
        return spec.fit_nuisance(d, w)
    deriv = spec.analytic_derivatives
    if deriv is not None and deriv.du_dh is not None:
        jac = lambda h: np.einsum("i,ijk->jk", w, deriv.du_dh(d, h))
    else:
        jac = lambda h: fd_jacobian(lambda hh: w @ spec.u(d, hh), h)
    h = newton_root(lambda h: w @ spec.u(d, h), jac, np.zeros(spec.q_nuis), what="nuisance equation")
    norm = float(np.max(np.abs(w @ spec.u(d, h))))
    return NuisanceFit(h=h, iterations=-1, score_sup_norm=norm, converged=True)


def solve_target(spec: EstimandSpec, d: Dataset, w, h=None, *, epsilon=DEFAULT_EPSILON):
    """Weighted target root, via the closed form when the spec provides one."""
    if spec.closed_form is not None:
        return np.atleast_1d(np.asarray(spec.closed_form(d, as_weights(w), h, epsilon), dtype=float))
    return solve_weighted_ee(spec, d, w, h)


# -- loss minimisation ------------------------------------------------------


@dataclass(frozen=True)
class Loss:
    """Per-observation loss with its gradient and, optionally, curvature.

    ``value(d, theta)`` -> (n,), ``gradient(d, theta)`` -> (n, p),
    ``hessian(d, theta)`` -> (n, p, p). ``weighted_hessian(d, theta, w)``
    may be supplied instead of ``hessian`` as a cheaper weighted sum.
    """

    value: Callable
    gradient: Callable
    p: int
    hessian: Optional[Callable] = None
    weighted_hessian: Optional[Callable] = None
    name: str = "loss"

    def weighted_curvature(self, d, theta, w):
        if self.weighted_hessian is not None:
            return self.weighted_hessian(d, theta, w)
        if self.hessian is not None:
            return np.einsum("i,ijk->jk", w, self.hessian(d, theta))
        return None


def squared_loss() -> Loss:
    return Loss(
        value=lambda d, t: (d.y - t[0]) ** 2,
        gradient=lambda d, t: (-2.0 * (d.y - t[0]))[:, None],
        hessian=lambda d, t: np.full((d.n, 1, 1), 2.0),
        weighted_hessian=lambda d, t, w: np.array([[2.0 * w.sum()]]),
        p=1,
        name="squared",
    )


def logistic_loss(q: int, intercept: bool) -> Loss:
    """Negative Bernoulli log-likelihood of z given the (augmented) covariates."""

    def value(d, h):
        eta = d.design(intercept) @ h
        return np.logaddexp(0.0, eta) - d.z * eta

    def gradient(d, h):
        X = d.design(intercept)
        return X * (expit(X @ h) - d.z)[:, None]

    def weighted_hessian(d, h, w):
        X = d.design(intercept)
        e = expit(X @ h)
        return (X * (w * e * (1.0 - e))[:, None]).T @ X

    def hessian(d, h):
        X = d.design(intercept)
        e = expit(X @ h)
        return np.einsum("i,ij,ik->ijk", e * (1.0 - e), X, X)

    return Loss(value, gradient, p=q + int(intercept), hessian=hessian,
                weighted_hessian=weighted_hessian, name="logistic")


def minimize_weighted_loss(loss: Loss, d: Dataset, w, init=None, *, tol=LOSS_TOL, max_iter=500):
    """Minimise ``sum_i w_i l(O_i; theta)``.

    Newton steps on the weighted gradient when curvature is available,
    otherwise a finite-difference Hessian of the weighted gradient,
    symmetrised and shifted until positive definite. Each step is
    backtracked until the weighted loss does not increase.
    """
    w = as_weights(w)
    theta = np.zeros(loss.p) if init is None else np.atleast_1d(np.asarray(init, dtype=float)).copy()

    def f(t):
        return float(w @ loss.value(d, t))

    def grad(t):
        return w @ np.asarray(loss.gradient(d, t)).reshape(d.n, loss.p)

    fval = f(theta)
    g = grad(theta)
    if not (np.isfinite(fval) and np.all(np.isfinite(g))):
        raise SolverDiverged(f"{loss.name} loss is not finite at the starting point")
    for _ in range(max_iter + 1):
        H = loss.weighted_curvature(d, theta, w)
        if H is None:
            H = fd_jacobian(grad, theta)
            H = 0.5 * (H + H.T)
        H = np.atleast_2d(H)
        step = _damped_newton_step(H, g)
        if np.max(np.abs(g)) <= tol:
            if np.max(np.abs(step)) > 1e-4 * (1.0 + np.max(np.abs(theta))):
                raise SolverDiverged(f"{loss.name} loss has no finite minimiser (flat direction)")
            return theta
        t = 1.0
        gnorm = np.max(np.abs(g))
        for _ in range(MAX_HALVINGS + 1):
            cand = theta - t * step
            f_new = f(cand)
            if np.isfinite(f_new):
                if f_new <= fval:
                    g_new = grad(cand)
                    break
                # decrease below rounding of f: fall back to the gradient norm
                if f_new - fval <= 1e-13 * (1.0 + abs(fval)):
                    g_new = grad(cand)
                    if np.max(np.abs(g_new)) < gnorm:
                        break
            t *= 0.5
        else:
            raise SolverDiverged(f"{loss.name} loss: line search failed")
        if np.allclose(cand, theta, rtol=0, atol=0):
            raise SolverDiverged(f"{loss.name} loss: stalled above gradient tolerance")
        theta, fval, g = cand, f_new, g_new
    raise SolverDiverged(f"{loss.name} loss: no convergence in {max_iter} iterations")


def _damped_newton_step(H, g):
    scale = max(np.max(np.abs(np.diag(H))), 1e-12)
    mu = 0.0
    eye = np.eye(H.shape[0])
    for _ in range(60):
        try:
            c = np.linalg.cholesky(H + mu * eye)
        except np.linalg.LinAlgError:
            mu = max(2.0 * mu, 1e-8 * scale)
            continue
        y = np.linalg.solve(c, g)
        return np.linalg.solve(c.T, y)
    raise SolverDiverged("could not regularise the curvature to positive definite")
