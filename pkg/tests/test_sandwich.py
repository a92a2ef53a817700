from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eelink import dgp
from eelink.errors import SingularJacobian
from eelink.estimators import fit_logistic_weighted, solve_target
from eelink.model import Dataset
from eelink.rng import equal_weights
from eelink.sandwich import (
    empirical_jacobians,
    sandwich_augmented,
    sandwich_linked,
    sandwich_plain,
    sandwich_sigma,
)
from eelink.scores import make_spec, mean_spec, strip_fast_paths

from conftest import design_data

KINDS = ["gest", "ipw", "att", "psreg"]
DESIGN_FOR = {"gest": "gest6", "ipw": "ipw2", "att": "ipw2", "psreg": "ipw2"}


def linked_fit(kind, d, intercept=True):
    spec = make_spec(kind, d.q, intercept)
    w = equal_weights(d.n)
    h = fit_logistic_weighted(d, w, intercept).h
    return spec, solve_target(spec, d, w, h), h


def test_mean_functional_plain_sandwich(ipw_data):
    spec = mean_spec()
    theta = np.array([ipw_data.y.mean()])
    M = empirical_jacobians(spec, ipw_data, theta)[0]
    np.testing.assert_array_equal(M, [[-1.0]])
    L = sandwich_plain(spec, ipw_data, theta)
    assert L[0, 0] == pytest.approx(ipw_data.y.var(ddof=0), rel=1e-12)
    np.testing.assert_allclose(sandwich_sigma(spec, ipw_data, theta, None), L, rtol=1e-14)


def test_plain_sandwich_monte_carlo_variance():
    rng = np.random.default_rng(4)
    n = 100_000
    d = Dataset(y=rng.normal(1.0, 2.0, n), z=np.arange(n) % 2, x=np.zeros((n, 1)))
    L = sandwich_plain(mean_spec(), d, [d.y.mean()])
    assert L[0, 0] == pytest.approx(4.0, rel=0.05)


def test_plain_sandwich_constant_outcome():
    d = Dataset(y=np.full(5, 2.5), z=[0, 1, 0, 1, 0], x=np.zeros((5, 1)))
    assert sandwich_plain(mean_spec(), d, [2.5])[0, 0] == 0.0


def test_gest_jacobian_at_half_propensity(ipw_data):
    spec = make_spec("gest", ipw_data.q, True)
    M = empirical_jacobians(spec, ipw_data, [1.0], np.zeros(3))[0]
    assert M[0, 0] == pytest.approx(-ipw_data.z.mean() / 2, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KINDS), st.booleans(), st.integers(0, 10_000), st.floats(-2, 2))
def test_analytic_and_fd_jacobians_agree(kind, intercept, seed, jitter):
    d, _ = design_data(DESIGN_FOR[kind], 150, seed)
    spec, theta, h = linked_fit(kind, d, intercept)
    # randomize the evaluation point as well
    rng = np.random.default_rng(seed)
    theta = theta + jitter
    h = h + rng.normal(0, 0.1, h.shape)
    analytic = empirical_jacobians(spec, d, theta, h, analytic=True)
    fd = empirical_jacobians(spec, d, theta, h, analytic=False)
    for a, f in zip(analytic, fd):
        scale = max(np.max(np.abs(a)), 1e-12)
        assert np.max(np.abs(a - f)) <= 1e-5 * scale


def test_sigma_zero_residual(ipw_data):
    d = ipw_data.with_y(3.0 * ipw_data.z)
    spec = make_spec("gest", d.q, False)
    np.testing.assert_array_equal(sandwich_sigma(spec, d, [3.0], dgp.IPW_H0), [[0.0]])


def test_sigma_plugin_scale_gest():
    d, _ = design_data("gest6", 20_000, 31)
    spec = make_spec("gest", d.q, False)
    theta = solve_target(spec, d, equal_weights(d.n), dgp.GEST_H0)
    assert sandwich_sigma(spec, d, theta, dgp.GEST_H0)[0, 0] == pytest.approx(83.39, rel=0.1)


def test_v_equals_sigma_when_target_ignores_nuisance(ipw_data):
    gest = make_spec("gest", ipw_data.q, True)
    m = mean_spec()
    spec = replace(gest, kind="custom", target_score=m.target_score,
                   analytic_derivatives=None, closed_form=None)
    h = fit_logistic_weighted(ipw_data, equal_weights(ipw_data.n), True).h
    est = sandwich_linked(spec, ipw_data, [ipw_data.y.mean()], h)
    np.testing.assert_array_equal(est.M_h, np.zeros((1, 3)))
    np.testing.assert_allclose(est.V, est.Sigma, rtol=0, atol=0)


@pytest.mark.parametrize("kind,design,ref", [("gest", "gest6", 22.32), ("ipw", "ipw2", 5.68), ("att", "ipw2", 6.18)])
def test_linked_variance_approaches_asymptotic_value(kind, design, ref):
    d, _ = design_data(design, 200_000, 77)
    spec, theta, h = linked_fit(kind, d)
    assert sandwich_linked(spec, d, theta, h).V[0, 0] == pytest.approx(ref, rel=0.05)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KINDS), st.booleans(), st.integers(0, 10_000))
def test_block_identities_and_psd_ordering(kind, intercept, seed):
    d, _ = design_data(DESIGN_FOR[kind], 300, seed)
    spec, theta, h = linked_fit(kind, d, intercept)
    est = sandwich_linked(spec, d, theta, h)
    p = spec.p
    np.testing.assert_allclose(est.Lambda[:p, :p], est.V, atol=1e-8 * max(1, np.abs(est.V).max()), rtol=0)
    np.testing.assert_allclose(est.Lambda[p:, p:], est.Omega, atol=1e-8 * max(1, np.abs(est.Omega).max()), rtol=0)
    for S in (est.Sigma, est.V, est.Omega, est.Lambda):
        np.testing.assert_array_equal(S, S.T)
    assert np.linalg.eigvalsh(est.Sigma).min() >= -1e-8
    assert np.linalg.eigvalsh(est.Omega).min() >= -1e-8


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["gest", "ipw", "att"]), st.booleans(), st.integers(0, 10_000), st.sampled_from([100, 300, 1000]))
def test_sigma_dominates_v_for_propensity_scores(kind, intercept, seed, n):
    # holds because E[m u^T] = -M_h for these scores under the true propensity
    d, _ = design_data(DESIGN_FOR[kind], n, seed)
    spec, theta, h = linked_fit(kind, d, intercept)
    est = sandwich_linked(spec, d, theta, h)
    assert np.linalg.eigvalsh(est.Sigma - est.V).min() >= -1e-8


def test_sigma_minus_v_can_be_indefinite_for_psreg():
    d, _ = design_data("ipw2", 300, 0)
    spec, theta, h = linked_fit("psreg", d, False)
    est = sandwich_linked(spec, d, theta, h)
    assert np.linalg.eigvalsh(est.Sigma - est.V).min() < -1.0


def test_augmented_off_diagonal_blocks_small():
    d, _ = design_data("ipw2", 100_000, 5)
    spec, theta, h = linked_fit("ipw", d)
    est = sandwich_linked(spec, d, theta, h)
    off = est.Lambda[:1, 1:]
    bound = 0.05 * np.sqrt(est.V[0, 0] * np.diag(est.Omega))
    assert np.all(np.abs(off[0]) <= bound)


def test_augmented_standalone_matches_linked(ipw_data):
    spec, theta, h = linked_fit("att", ipw_data)
    eta = np.concatenate([theta, h])
    np.testing.assert_allclose(sandwich_augmented(spec, ipw_data, eta),
                               sandwich_linked(spec, ipw_data, theta, h).Lambda, rtol=1e-12, atol=1e-12)


def test_fd_sandwich_for_stripped_spec(ipw_data):
    spec, theta, h = linked_fit("ipw", ipw_data)
    a = sandwich_linked(spec, ipw_data, theta, h)
    b = sandwich_linked(strip_fast_paths(spec), ipw_data, theta, h)
    np.testing.assert_allclose(a.V, b.V, rtol=1e-5)


def test_singular_jacobian_raised():
    d = Dataset(y=[1.0, 2.0, 3.0, 4.0], z=[0, 1, 0, 1], x=[[1.0], [1.0], [1.0], [1.0]])
    spec = make_spec("gest", 1, True)  # intercept duplicates the constant covariate
    with pytest.raises(SingularJacobian):
        sandwich_linked(spec, d, [1.0], np.zeros(2))


def test_to_dict_shapes(ipw_data):
    spec, theta, h = linked_fit("psreg", ipw_data)
    out = sandwich_linked(spec, ipw_data, theta, h).to_dict()
    assert np.array(out["Lambda"]).shape == (5, 5)
    assert np.array(out["M_h"]).shape == (2, 3)
    assert out["n_used"] == ipw_data.n
