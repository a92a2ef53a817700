import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eelink import engines
from eelink.engines import (
    EngineConfig,
    PluginMethod,
    bb_posterior_augmented,
    bb_posterior_known_h,
    bb_posterior_linked,
    bb_posterior_plugin,
    llb_posterior,
    plugin_nuisance,
    stacked_residual,
)
from eelink.errors import DrawFailed
from eelink.estimators import fit_logistic_weighted, logistic_loss, solve_target, squared_loss
from eelink.model import WeightVector
from eelink.rng import Purpose, StreamKey, dirichlet_weights, equal_weights
from eelink.sandwich import sandwich_sigma
from eelink.scores import make_spec

from conftest import design_data


def equal_hook(n, key):
    return equal_weights(n)


def frequentist(spec, d):
    w = equal_weights(d.n)
    h = fit_logistic_weighted(d, w, spec.intercept).h
    return solve_target(spec, d, w, h), h


@pytest.fixture(scope="module")
def gest_setup():
    d, truth = design_data("gest6", 300, 12)
    return d, truth, make_spec("gest", d.q, True)


def test_known_h_equal_weights_reduction(gest_setup):
    d, truth, spec = gest_setup
    h0 = truth.nuisance(True)
    post = bb_posterior_known_h(spec, d, h0, EngineConfig(B=1, seed=0), weight_source=equal_hook)
    assert post.method == "known_h" and post.h_draws is None
    assert post.theta_draws[0, 0] == pytest.approx(solve_target(spec, d, equal_weights(d.n), h0)[0], abs=1e-12)


def test_known_h_zero_noise_draws_are_exact(gest_setup):
    d, truth, spec = gest_setup
    d3 = d.with_y(3.0 * d.z)
    post = bb_posterior_known_h(spec, d3, truth.nuisance(True), EngineConfig(B=50, seed=1))
    np.testing.assert_allclose(post.theta_draws, 3.0, atol=1e-12)


def test_known_h_variance_matches_sigma():
    d, truth = design_data("ipw2", 1000, 13)
    spec = make_spec("ipw", d.q, False)
    post = bb_posterior_known_h(spec, d, truth.h0, EngineConfig(B=500, seed=2))
    theta = solve_target(spec, d, equal_weights(d.n), truth.h0)
    sigma = sandwich_sigma(spec, d, theta, truth.h0)[0, 0]
    # B=500 draws: relative SE of the variance is about 6%
    assert post.theta_draws[:, 0].var(ddof=1) * d.n == pytest.approx(sigma, rel=0.2)


def test_plugin_true_h_is_known_h(gest_setup):
    d, truth, spec = gest_setup
    cfg = EngineConfig(B=20, seed=3)
    a = bb_posterior_plugin(spec, d, PluginMethod("true_h"), cfg, h0=truth.nuisance(True))
    b = bb_posterior_known_h(spec, d, truth.nuisance(True), cfg)
    np.testing.assert_array_equal(a.theta_draws, b.theta_draws)
    assert a.method == "plugin"


def test_plugin_freq_equal_weights_gives_two_step_estimate(gest_setup):
    d, _, spec = gest_setup
    post = bb_posterior_plugin(spec, d, PluginMethod("freq_logistic"), EngineConfig(B=1, seed=0),
                               weight_source=equal_hook)
    assert post.theta_draws[0, 0] == pytest.approx(frequentist(spec, d)[0][0], abs=1e-8)


def test_plugin_llb_mean_uses_average_of_llb_draws(gest_setup):
    d, _, spec = gest_setup
    cfg = EngineConfig(B=5, seed=4)
    h_hat, _ = plugin_nuisance(spec, d, PluginMethod("llb_mean", llb_draws=30), cfg)
    llb = llb_posterior(logistic_loss(d.q, True), d, EngineConfig(B=30, seed=4), purpose=Purpose.NUISANCE)
    np.testing.assert_array_equal(h_hat, llb.theta_draws.mean(axis=0))


def test_plugin_intercept_mismatch_rejected(gest_setup):
    d, _, spec = gest_setup
    with pytest.raises(ValueError):
        plugin_nuisance(spec, d, PluginMethod("freq_logistic", intercept=False), EngineConfig(B=1, seed=0))
    with pytest.raises(ValueError):
        PluginMethod("llb_mean", llb_draws=0)
    with pytest.raises(ValueError):
        PluginMethod("bogus")


@pytest.mark.parametrize("kind", ["gest", "ipw", "att", "psreg"])
def test_linked_and_augmented_equal_weight_reduction(kind):
    d, _ = design_data("ipw2", 200, 14)
    spec = make_spec(kind, d.q, True)
    theta_n, h_n = frequentist(spec, d)
    for engine in (bb_posterior_linked, bb_posterior_augmented):
        post = engine(spec, d, EngineConfig(B=1, seed=0), weight_source=equal_hook)
        np.testing.assert_allclose(post.theta_draws[0], theta_n, atol=1e-8, rtol=0)
        np.testing.assert_allclose(post.h_draws[0], h_n, atol=1e-8, rtol=0)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["gest", "ipw", "att", "psreg"]), st.integers(0, 10_000))
def test_augmented_matches_linked_and_solves_stacked_system(kind, seed):
    d, _ = design_data("gest6" if kind == "gest" else "ipw2", 150, seed)
    spec = make_spec(kind, d.q, True)
    cfg = EngineConfig(B=5, seed=seed)
    a = bb_posterior_augmented(spec, d, cfg)
    b = bb_posterior_linked(spec, d, cfg)
    assert np.max(np.abs(a.theta_draws - b.theta_draws)) <= 1e-8
    assert np.max(np.abs(a.h_draws - b.h_draws)) <= 1e-8
    for j in range(cfg.B):
        w = dirichlet_weights(d.n, StreamKey(seed, 0, j))
        eta = np.concatenate([a.theta_draws[j], a.h_draws[j]])
        assert np.max(np.abs(stacked_residual(spec, d, np.asarray(w), eta))) <= 1e-8


def test_linkage_same_weights_in_both_stages(monkeypatch, gest_setup):
    d, _, spec = gest_setup
    seen = []
    real_nuis, real_target = engines.solve_weighted_nuisance, engines.solve_target

    def nuis(spec_, d_, w):
        seen.append(("u", np.asarray(w).copy()))
        return real_nuis(spec_, d_, w)

    def target(spec_, d_, w, h, **kw):
        seen.append(("m", np.asarray(w).copy()))
        return real_target(spec_, d_, w, h, **kw)

    monkeypatch.setattr(engines, "solve_weighted_nuisance", nuis)
    monkeypatch.setattr(engines, "solve_target", target)
    bb_posterior_linked(spec, d, EngineConfig(B=4, seed=5))
    assert [tag for tag, _ in seen] == ["u", "m"] * 4
    for j in range(4):
        np.testing.assert_array_equal(seen[2 * j][1], seen[2 * j + 1][1])
        np.testing.assert_array_equal(seen[2 * j][1], np.asarray(dirichlet_weights(d.n, StreamKey(5, 0, j))))
    assert not np.array_equal(seen[0][1], seen[2][1])


def test_determinism(gest_setup):
    d, _, spec = gest_setup
    cfg = EngineConfig(B=10, seed=6, replicate_id=2)
    a, b = bb_posterior_linked(spec, d, cfg), bb_posterior_linked(spec, d, cfg)
    assert a.theta_draws.tobytes() == b.theta_draws.tobytes()
    assert a.h_draws.tobytes() == b.h_draws.tobytes() and a.retries_total == b.retries_total


def control_only(d):
    w = (1 - d.z) / (1 - d.z).sum()
    return WeightVector(w / w.sum())


def test_failed_draw_is_retried_on_retry_stream(gest_setup):
    d, _, spec = gest_setup
    keys = []

    def source(n, key):
        keys.append(key)
        if key.draw_id == 1 and key.retry_index < 2:
            return control_only(d)  # target not identified on these weights
        return dirichlet_weights(n, key)

    post = bb_posterior_known_h(spec, d, np.zeros(spec.q_nuis), EngineConfig(B=3, seed=7), weight_source=source)
    assert post.retries_total == 2 and post.B == 3
    retried = [k for k in keys if k.draw_id == 1]
    assert [k.retry_index for k in retried] == [0, 1, 2]
    assert [k.purpose for k in retried] == [Purpose.WEIGHTS, Purpose.RETRY, Purpose.RETRY]


def test_draw_failed_after_exhausting_retries(gest_setup):
    d, _, spec = gest_setup
    with pytest.raises(DrawFailed) as exc:
        bb_posterior_known_h(spec, d, np.zeros(spec.q_nuis), EngineConfig(B=2, seed=8, max_retries=3),
                             weight_source=lambda n, key: control_only(d))
    assert exc.value.draw_id == 0 and exc.value.attempts == 4


def test_llb_squared_loss_gives_weighted_means(ipw_data):
    cfg = EngineConfig(B=8, seed=9)
    post = llb_posterior(squared_loss(), ipw_data, cfg)
    assert post.method == "llb"
    expected = [np.asarray(dirichlet_weights(ipw_data.n, StreamKey(9, 0, j))) @ ipw_data.y for j in range(8)]
    np.testing.assert_allclose(post.theta_draws[:, 0], expected, atol=1e-10)


def test_llb_constant_outcome(ipw_data):
    d = ipw_data.with_y(np.full(ipw_data.n, 4.25))
    post = llb_posterior(squared_loss(), d, EngineConfig(B=6, seed=10))
    np.testing.assert_allclose(post.theta_draws, 4.25, atol=1e-12)


def test_llb_logistic_matches_linked_nuisance_draws(gest_setup):
    d, _, spec = gest_setup
    cfg = EngineConfig(B=6, seed=11)
    llb = llb_posterior(logistic_loss(d.q, True), d, cfg)
    linked = bb_posterior_linked(spec, d, cfg)
    np.testing.assert_allclose(llb.theta_draws, linked.h_draws, atol=1e-6)


def test_known_h_dimension_checked(gest_setup):
    d, _, spec = gest_setup
    with pytest.raises(ValueError):
        bb_posterior_known_h(spec, d, np.zeros(3), EngineConfig(B=1, seed=0))


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(B=0, seed=0)
    with pytest.raises(ValueError):
        EngineConfig(B=1, seed=-1)
