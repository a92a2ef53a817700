"""Empirical sandwich variances for estimating equations with a nuisance.

Notation: ``M_theta`` and ``M_h`` are the mean Jacobians of the target
score in theta and h, ``U_h`` the mean Jacobian of the nuisance score.
All second-moment ("meat") matrices average over n, not n - 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import SingularJacobian
from .estimators import fd_jacobian
from .model import Dataset, EstimandSpec

RCOND_MIN = 1e-10


@dataclass(frozen=True, eq=False)
class SandwichEstimate:
    M_theta: NDArray[np.float64]
    M_h: NDArray[np.float64]
    U_h: NDArray[np.float64]
    Omega: NDArray[np.float64]
    Sigma: NDArray[np.float64]
    V: NDArray[np.float64]
    Lambda: NDArray[np.float64]
    n_used: int

    def to_dict(self) -> dict:
        out = {k: np.asarray(getattr(self, k)).tolist()
               for k in ("M_theta", "M_h", "U_h", "Omega", "Sigma", "V", "Lambda")}
        out["n_used"] = int(self.n_used)
        return out


def _inv(a, what):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return a
    if not np.all(np.isfinite(a)):
        raise SingularJacobian(f"{what} is not finite")
    s = np.linalg.svd(a, compute_uv=False)
    if not (s[0] > 0 and s[-1] / s[0] > RCOND_MIN):
        raise SingularJacobian(f"{what} is numerically singular")
    lu_inv = np.linalg.inv(a)
    return lu_inv


def _sym(s):
    return 0.5 * (s + s.T)


def _meat(f):
    return f.T @ f / f.shape[0]


def _bread_meat(a_inv, meat):
    return _sym(a_inv @ meat @ a_inv.T)


def empirical_jacobians(spec: EstimandSpec, d: Dataset, theta_hat, h_hat=None, *, analytic=True):
    """Sample-average Jacobians ``(M_theta, M_h, U_h)``.

    Analytic per-observation derivatives are averaged when the spec carries
    them and ``analytic`` is true; otherwise central finite differences of
    the mean score with relative step 1e-6 * (1 + |x|).
    """
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    h = None if h_hat is None else np.atleast_1d(np.asarray(h_hat, dtype=float))
    q = spec.q_nuis
    deriv = spec.analytic_derivatives if analytic else None

    if deriv is not None and deriv.dm_dtheta is not None:
        M_theta = deriv.dm_dtheta(d, theta, h).mean(axis=0)
    else:
        M_theta = fd_jacobian(lambda t: spec.m(d, t, h).mean(axis=0), theta)
    if q == 0:
        return M_theta, np.zeros((spec.p, 0)), np.zeros((0, 0))
    if deriv is not None and deriv.dm_dh is not None:
        M_h = deriv.dm_dh(d, theta, h).mean(axis=0)
    else:
        M_h = fd_jacobian(lambda hh: spec.m(d, theta, hh).mean(axis=0), h)
    if deriv is not None and deriv.du_dh is not None:
        U_h = deriv.du_dh(d, h).mean(axis=0)
    else:
        U_h = fd_jacobian(lambda hh: spec.u(d, hh).mean(axis=0), h)
    return np.atleast_2d(M_theta), np.atleast_2d(M_h), np.atleast_2d(U_h)


def sandwich_plain(spec: EstimandSpec, d: Dataset, theta_hat) -> NDArray[np.float64]:
    """``A^-1 B A^-T`` for a system without nuisance."""
    theta = np.atleast_1d(theta_hat)
    A = empirical_jacobians(spec, d, theta, None)[0]
    m = spec.m(d, theta, None)
    return _bread_meat(_inv(A, "M_theta"), _meat(m))


def sandwich_sigma(spec: EstimandSpec, d: Dataset, theta_hat, h_hat=None) -> NDArray[np.float64]:
    """Variance as if the nuisance were known and equal to ``h_hat``."""
    M_theta = empirical_jacobians(spec, d, theta_hat, h_hat)[0]
    m = spec.m(d, np.atleast_1d(theta_hat), h_hat)
    return _bread_meat(_inv(M_theta, "M_theta"), _meat(m))


def influence_terms(spec, d, theta_hat, h_hat, jacobians=None):
    """Per-observation ``m_i - M_h U_h^-1 u_i`` (n x p)."""
    M_theta, M_h, U_h = jacobians or empirical_jacobians(spec, d, theta_hat, h_hat)
    m = spec.m(d, np.atleast_1d(theta_hat), h_hat)
    u = spec.u(d, h_hat)
    K = M_h @ _inv(U_h, "U_h")
    return m - u @ K.T


def sandwich_linked(spec: EstimandSpec, d: Dataset, theta_hat, h_hat, *, analytic=True) -> SandwichEstimate:
    """All variance blocks at the joint solution ``(theta_hat, h_hat)``."""
    theta = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    h = np.atleast_1d(np.asarray(h_hat, dtype=float))
    M_theta, M_h, U_h = empirical_jacobians(spec, d, theta, h, analytic=analytic)
    Mi = _inv(M_theta, "M_theta")
    Ui = _inv(U_h, "U_h")
    m = spec.m(d, theta, h)
    u = spec.u(d, h)
    lam = m - u @ (M_h @ Ui).T
    Sigma = _bread_meat(Mi, _meat(m))
    V = _bread_meat(Mi, _meat(lam))
    Omega = _bread_meat(Ui, _meat(u))
    Lambda = sandwich_augmented(spec, d, np.concatenate([theta, h]),
                                jacobians=(M_theta, M_h, U_h))
    return SandwichEstimate(M_theta, M_h, U_h, Omega, Sigma, V, Lambda, d.n)


def sandwich_augmented(spec: EstimandSpec, d: Dataset, eta_hat, *, jacobians=None, analytic=True):
    """Sandwich for the stacked score ``a = (m; u)`` in ``eta = (theta, h)``.

    Inverts the full block-triangular bread directly rather than by blocks.
    """
    eta = np.asarray(eta_hat, dtype=float)
    p, q = spec.p, spec.q_nuis
    theta, h = eta[:p], eta[p:]
    M_theta, M_h, U_h = jacobians or empirical_jacobians(spec, d, theta, h, analytic=analytic)
    A = np.zeros((p + q, p + q))
    A[:p, :p] = M_theta
    A[:p, p:] = M_h
    A[p:, p:] = U_h
    a = np.column_stack([spec.m(d, theta, h), spec.u(d, h)])
    return _bread_meat(_inv(A, "stacked Jacobian"), _meat(a))
