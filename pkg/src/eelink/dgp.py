"""The two simulation designs.

``gest6``: six AR(0.8)-correlated Gaussian covariates, a nonlinear outcome
nuisance and a logistic propensity without intercept. ``ipw2``: two
independent Gaussian covariates with a linear outcome nuisance.

Variates are drawn from the given generator in a fixed order: the
covariate normals (n x q, row-major), then n uniforms for treatment, then
n outcome-noise normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import EELinkError
from .estimators import expit
from .model import Dataset

THETA0 = 3.0
GEST_H0 = np.arange(1, 7) / 16.0
IPW_H0 = np.array([1.0, 0.5])
MAX_REGENERATIONS = 100


@dataclass(frozen=True)
class DesignSpec:
    kind: str
    theta0: float
    h0: tuple
    asymptotic_variance_ref: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return len(self.h0)


@dataclass(frozen=True, eq=False)
class TruthBundle:
    theta0: float
    h0: NDArray[np.float64]
    e0_values: NDArray[np.float64]

    def nuisance(self, intercept: bool) -> NDArray[np.float64]:
        """True coefficients in fitted-model coordinates (zero intercept)."""
        return np.concatenate([[0.0], self.h0]) if intercept else np.array(self.h0)


DESIGNS = {
    "gest6": DesignSpec("gest6", THETA0, tuple(GEST_H0), {"gest": 22.32}),
    "ipw2": DesignSpec("ipw2", THETA0, tuple(IPW_H0), {"ipw": 5.68, "att": 6.18}),
}


def ar_covariance(q: int, rho: float) -> NDArray[np.float64]:
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    idx = np.arange(q)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def g0_gest(x):
    x = np.atleast_2d(x)
    return (
        x[:, 0] + np.exp(x[:, 1] - 1.0) + np.abs(x[:, 2]) + np.exp(x[:, 3] - 1.0)
        + np.abs(x[:, 4]) + np.abs(x[:, 4] * x[:, 5])
    )


def g0_ipw(x):
    x = np.atleast_2d(x)
    return 2.0 * x[:, 0] + x[:, 1]


_GEST_CHOL = np.linalg.cholesky(ar_covariance(6, 0.8))


def _assemble(x, h0, g0, stream, n, zero_noise_and_treatment):
    e0 = expit(x @ h0)
    uni = stream.random(n)
    noise = stream.standard_normal(n)
    z = (uni < e0).astype(np.int64)
    if zero_noise_and_treatment:
        z = np.zeros(n, dtype=np.int64)
        noise = np.zeros(n)
    y = THETA0 * z + g0(x) + noise
    return Dataset(y=y, z=z, x=x), TruthBundle(THETA0, np.array(h0, dtype=float), e0)


def _generate(n, stream, draw_x, h0, g0, zero_noise_and_treatment):
    if n < 2:
        raise ValueError("n must be at least 2")
    for _ in range(MAX_REGENERATIONS):
        x = draw_x(n)
        d, truth = _assemble(x, h0, g0, stream, n, zero_noise_and_treatment)
        if zero_noise_and_treatment or n >= 20 or 0 < d.z.sum() < n:
            return d, truth
    raise EELinkError(f"no two-arm sample after {MAX_REGENERATIONS} attempts at n={n}")


def gen_gest_design(n: int, stream: np.random.Generator, *, zero_noise_and_treatment=False):
    """Draw ``n`` rows from the six-covariate G-estimation design.

    ``zero_noise_and_treatment`` is a test hook forcing U = 0 and Z = 0 so
    that ``y == g0(x)``.
    """

    def draw_x(n):
        return stream.standard_normal((n, 6)) @ _GEST_CHOL.T

    return _generate(n, stream, draw_x, GEST_H0, g0_gest, zero_noise_and_treatment)


def gen_ipw_design(n: int, stream: np.random.Generator, *, zero_noise_and_treatment=False):
    """Draw ``n`` rows from the two-covariate weighting design.

    X1 ~ N(1/2, var 1/16) and X2 ~ N(1, var 1/4), independent.
    """
    loc = np.array([0.5, 1.0])
    sd = np.array([0.25, 0.5])

    def draw_x(n):
        return loc + stream.standard_normal((n, 2)) * sd

    return _generate(n, stream, draw_x, IPW_H0, g0_ipw, zero_noise_and_treatment)


GENERATORS = {"gest6": gen_gest_design, "ipw2": gen_ipw_design}


def generate(design: str, n: int, stream: np.random.Generator):
    try:
        gen = GENERATORS[design]
    except KeyError:
        raise ValueError(f"unknown design {design!r}; expected one of {', '.join(GENERATORS)}") from None
    return gen(n, stream)
