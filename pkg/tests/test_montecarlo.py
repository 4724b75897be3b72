import numpy as np
import pytest

from fimlab import settings
from fimlab.errors import InputRejected
from fimlab.expfam import moments
from fimlab.models import MCConfig
from fimlab.montecarlo import (
    _ratios,
    convergence_sweep,
    distance_curve,
    fit_to_target,
    histograms_of,
    ratio_histograms,
    run_trials,
    trained_vs_random,
)
from fimlab.network import forward
from fimlab.spectrum import psd_probability_bound
from tests.oracles import random_bernoulli_configs


def _config(layers, activation="tanh", family="bernoulli", p=None, net_seed=0, **kw) -> MCConfig:
    net = {"layers": layers, "activation": activation, "family": {"family": family, "dim": layers[-1]}, "seed": net_seed}
    if p is not None:
        net["p"] = p
    return MCConfig(network=net, **kw)


def _binomial_floor(target: float, R: int) -> float:
    # one-sided 99% normal-approximation floor for a frequency estimated from R trials
    return target - 2.33 * np.sqrt(max(target * (1 - target), 1e-12) / R)


def test_zero_variance_estimator1():
    cfg = _config([3, 4, 1], p=[0.5], estimator="1", N=7, R=50, seed=3)
    s = run_trials(cfg, threads=1)
    assert np.all(s.frobenius_errors == 0.0)
    assert np.all(s.empirical_var == 0.0)
    np.testing.assert_allclose(s.empirical_cov, 0.0, atol=1e-25)
    assert np.all(s.closed_form_var == 0.0)
    np.testing.assert_allclose(s.mean_estimate, s.exact, rtol=1e-14)
    assert s.psd_frequency == 1.0
    assert np.all(s.bias_within_se())


def test_affine_net_estimator2_is_exact():
    cfg = _config([3, 2], estimator="2", N=5, R=30, seed=4)
    s = run_trials(cfg, threads=1)
    assert np.all(s.frobenius_errors == 0.0)
    assert np.all(s.min_eig_bounds == 0.0)


def test_run_trials_summary_shape_and_invariants():
    cfg = _config([2, 3, 2], estimator="combined", alpha=0.3, N=8, R=40, seed=5, eps=[0.1, 0.5])
    s = run_trials(cfg, threads=2)
    P = s.exact.shape[0]
    assert s.frobenius_errors.shape == (40,)
    assert s.empirical_cov.shape == (P, P, P, P)
    np.testing.assert_allclose(np.einsum("ijij->ij", s.empirical_cov), s.empirical_var, rtol=1e-12, atol=1e-18)
    assert 0.0 <= s.psd_frequency <= 1.0
    assert set(s.chebyshev) == {0.1, 0.5}
    assert set(s.bound_ratios) == {"frobenius_1", "frobenius_2", "elementwise_1", "elementwise_2", "linf_1", "linf_2"}
    assert np.all(s.lambda_min_2 >= s.min_eig_bounds - 1e-10)
    doc = s.to_json_dict()
    assert doc["metadata"]["seed"] == 5
    assert doc["min_eig_bound_violations"] == 0
    assert len(s.trial_rows()) == 40


def test_bias_check_follows_se_sigma(monkeypatch):
    R = 300
    s = run_trials(_config([2, 2, 1], estimator="1", N=10, R=R, seed=8), threads=2)
    assert np.all(s.bias_within_se())
    assert s.to_json_dict()["bias_within_se"] is True
    monkeypatch.setattr(settings, "FIMLAB_SE_SIGMA", 0.0)
    assert not np.all(s.bias_within_se())
    doc = s.to_json_dict()
    assert doc["se_sigma"] == 0.0
    assert doc["bias_within_se"] is False
    assert np.all(s.bias_within_se(sigma=1e6))


def test_run_trials_deterministic_across_thread_counts():
    cfg = _config([2, 3, 2], activation="sigmoid", estimator="2", N=6, R=64, seed=11)
    one = run_trials(cfg, threads=1)
    for threads in (2, 8):
        other = run_trials(cfg, threads=threads)
        np.testing.assert_array_equal(one.frobenius_errors, other.frobenius_errors)
        np.testing.assert_array_equal(one.mean_estimate, other.mean_estimate)
        np.testing.assert_array_equal(one.empirical_cov, other.empirical_cov)
        np.testing.assert_array_equal(one.lambda_min, other.lambda_min)
    again = run_trials(cfg, threads=1)
    np.testing.assert_array_equal(one.distance_12, again.distance_12)


def test_run_trials_rejects_bad_config_before_sampling():
    with pytest.raises(InputRejected) as ei:
        run_trials(_config([3, 2], subset=[0, 99], R=10))
    assert ei.value.code == "subset_out_of_range"
    with pytest.raises(InputRejected) as ei:
        run_trials(_config([3, 2], eps=[1.5], R=10))
    assert ei.value.code == "eps_out_of_range"
    with pytest.raises(InputRejected) as ei:
        run_trials(_config([3, 2], estimator="combined", alpha=2.0, R=10))
    assert ei.value.code == "alpha_out_of_range"


def test_ratios_conventions():
    out = _ratios(np.array([0.0, 0.0, 1.0, 2.0]), np.array([0.0, 1.0, 0.0, 4.0]))
    assert out[0] == 0.0 and np.isinf(out[1]) and out[2] == 0.5
    assert out.size == 3
    np.testing.assert_array_equal(_ratios(np.array([[1.0, 3.0]]), 2.0), [0.5, 1.5])


def test_zero_variance_ratios_are_excluded():
    cfg = _config([3, 1], p=[0.5], N=5, R=20, seed=1)
    h = histograms_of(run_trials(cfg, threads=1), bins=5)
    assert h.ratios["elementwise_1"].size == 0
    assert h.ratios["frobenius_2"].size == 0
    assert h.medians()["elementwise_1"] is None
    counts, edges = h.bins["elementwise_1"]
    assert counts.sum() == 0 and edges[0] == 0.0


def test_convergence_sentinels():
    fit = convergence_sweep(_config([3, 1], p=[0.5], estimator="1", R=20, seed=2), [10, 100])
    assert fit.slope is None
    assert np.all(fit.mean_errors == 0.0)
    fit = convergence_sweep(_config([2, 1], family="normal", estimator="2", R=20, seed=2), [10, 100, 1000])
    assert fit.slope is None and fit.stderr is None
    with pytest.raises(InputRejected):
        convergence_sweep(_config([2, 1], R=5), [10])


def test_distance_curve_zero_and_reproducible():
    cfg = _config([3, 1], p=[0.5], R=15, seed=3)
    curve = distance_curve(cfg, [10, 100])
    assert np.all(curve.mean_distance == 0.0)
    assert curve.spearman is None and curve.decreasing is None

    cfg = _config([2, 3, 2], R=1, seed=9)
    a = distance_curve(cfg, [10, 100, 1000])
    b = distance_curve(cfg, [10, 100, 1000], threads=4)
    np.testing.assert_array_equal(a.mean_distance, b.mean_distance)


def test_fit_to_target_reaches_target():
    cfg = _config([2, 3, 1], seed=0)
    spec, params, x, _ = cfg.build()
    fitted = fit_to_target(spec, params, x, [0.9])
    eta = moments(spec.family, forward(spec, fitted, x).h_out).eta
    assert abs(eta[0] - 0.9) < 1e-3


def test_trained_vs_random_reports_medians():
    cfg = _config([2, 3, 1], N=10, R=40, seed=6)
    out = trained_vs_random(cfg, [0.9], threads=2)
    assert set(out) == {"random", "trained", "trained_looser"}
    assert set(out["random"]) == set(out["trained"]) == set(out["trained_looser"])
    assert all(v is None or v >= 0.0 for v in out["trained"].values())


@pytest.mark.parametrize("net_seed", [0, 1, 2])
def test_trained_vs_random_multi_output(net_seed):
    R = 60
    target = [0.9, 0.2]
    cfg = _config([2, 3, 2], N=10, R=R, seed=40 + net_seed, net_seed=net_seed)
    spec, params, x, _ = cfg.build()
    eta = moments(spec.family, forward(spec, fit_to_target(spec, params, x, target), x).h_out).eta
    assert np.linalg.norm(eta - target) < 1e-3

    out = trained_vs_random(cfg, target, threads=2)
    tol = 1.0 + settings.FIMLAB_SE_SIGMA * np.sqrt(2.0 / (R - 1))
    for kind, looser in out["trained_looser"].items():
        rnd, trn = out["random"][kind], out["trained"][kind]
        assert rnd is not None and trn is not None, kind
        assert 0.0 <= rnd <= tol and 0.0 <= trn <= tol, kind
        assert looser == (trn < rnd)


@pytest.mark.slow
def test_empirical_variance_matches_closed_form():
    for estimator in ("1", "2"):
        R = 10_000
        cfg = _config([2, 2, 1], p=[0.3], estimator=estimator, N=10, R=R, seed=21)
        s = run_trials(cfg)
        tol = settings.FIMLAB_SE_SIGMA * np.sqrt(2.0 / (R - 1))
        np.testing.assert_allclose(s.empirical_var, s.closed_form_var, rtol=tol, atol=1e-12)


@pytest.mark.slow
def test_mean_estimate_is_unbiased_at_mc_scale():
    for estimator in ("1", "2", "combined"):
        R = 4000
        s = run_trials(_config([2, 3, 2], estimator=estimator, N=10, R=R, seed=22))
        assert np.linalg.norm(s.mean_estimate - s.exact) <= settings.FIMLAB_SE_SIGMA * np.sqrt(np.sum(s.closed_form_var) / R)


@pytest.mark.slow
def test_convergence_rate_normal_head():
    fit = convergence_sweep(_config([2, 1], family="normal", estimator="1", R=2000, seed=23), [10, 100, 1000, 10_000])
    assert -0.6 <= fit.slope <= -0.4


@pytest.mark.slow
def test_distance_decreases_on_random_net():
    curve = distance_curve(_config([2, 3, 2], R=200, seed=24), [10, 100, 1000, 10_000])
    assert curve.decreasing
    assert curve.mean_distance[0] > curve.mean_distance[-1]


@pytest.mark.slow
def test_chebyshev_coverage():
    R = 2000
    s = run_trials(_config([2, 3, 1], p=[0.3], estimator="1", N=20, R=R, seed=25, eps=[0.1, 0.5]))
    for eps, (radius, coverage) in s.chebyshev.items():
        assert radius > 0.0
        assert coverage >= _binomial_floor(1.0 - eps, R)


def test_psd_frequency_respects_probability_bound():
    # one tanh unit with a steep output weight: curvature large enough to matter, bound still positive at N = 10
    R, N = 2000, 10
    net = {"layers": [1, 1, 1], "activation": "tanh", "family": {"family": "bernoulli", "dim": 1}, "weights": [[[0.66, 0.0]], [[3.0, 0.0]]], "x": [1.0]}
    cfg = MCConfig(network=net, estimator="2", N=N, R=R, seed=26, subset=[0])
    spec, params, x, subset = cfg.build()
    bound = psd_probability_bound(spec, params, x, N, subset)
    assert bound is not None and 0.6 < bound < 0.9
    s = run_trials(cfg, threads=2)
    assert np.all(s.lambda_min_2 >= s.min_eig_bounds - 1e-10)
    assert s.psd_frequency < 1.0
    assert s.psd_frequency >= _binomial_floor(bound, R)


@pytest.mark.slow
def test_negative_spectrum_shrinks_like_root_N():
    ns = [100, 1000, 10_000]
    means = []
    for n in ns:
        s = run_trials(_config([2, 4, 1], p=[0.3], estimator="2", N=n, R=2000, seed=27))
        means.append(np.mean(np.abs(s.min_eig_bounds)))
    slope = np.polyfit(np.log(ns), np.log(means), 1)[0]
    assert -0.6 <= slope <= -0.4


@pytest.mark.slow
@pytest.mark.parametrize("layers,activation,seed", random_bernoulli_configs(20, max_depth=2, max_width=3, seed=31))
def test_bound_ratios_at_most_one(layers, activation, seed):
    R = 400
    h = ratio_histograms(_config(layers, activation=activation, N=10, R=R, seed=seed, net_seed=seed))
    tol = 1.0 + settings.FIMLAB_SE_SIGMA * np.sqrt(2.0 / (R - 1))
    for kind, vals in h.ratios.items():
        assert np.all(vals <= tol), kind
