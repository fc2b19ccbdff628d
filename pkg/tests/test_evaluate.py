import math

import numpy as np
import pytest

from rtb.diffusion import Schedule, init_drift_net
from rtb.discrete import (
    all_sequences,
    ar_log_prob,
    default_seq_reward,
    enumerate_posterior,
    init_tabular,
    sample_ar,
)
from rtb.evaluate import (
    ModeHistogram,
    estimate_log_z,
    excluded_mass,
    log_mean_exp,
    mode_count,
    mode_histogram,
    tv_distance,
)
from rtb.losses import PosteriorModel
from rtb.targets import GmmTarget, RewardSpec, posterior_sample, reference_bin_weights


class TestHistogram:
    def test_points_at_means(self):
        g = GmmTarget()
        h = mode_histogram(g.means, g)
        np.testing.assert_array_equal(h.counts, np.ones(25))
        assert h.freqs.sum() == pytest.approx(1.0)

    def test_uniform_has_zero_tv(self):
        g = GmmTarget()
        h = mode_histogram(np.repeat(g.means, 4, axis=0), g)
        assert tv_distance(h, np.full(25, 0.04)) == pytest.approx(0.0, abs=1e-15)

    def test_tv_disjoint_is_one(self):
        assert tv_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_mode_count_threshold(self):
        h = ModeHistogram(np.array([98, 1, 1, 0]), 100)
        assert mode_count(h) == 3
        assert mode_count(h, threshold=0.02) == 1

    def test_excluded_mass(self):
        assert excluded_mass(np.array([0.5, 0.3, 0.2]), np.array([1.0, 0.0, 0.0])) == pytest.approx(0.5)

    def test_counts_must_sum(self):
        with pytest.raises(ValueError):
            ModeHistogram(np.array([1, 2]), 4)

    def test_exact_posterior_draws_are_close(self):
        g, r = GmmTarget(), RewardSpec()
        h = mode_histogram(posterior_sample(r, np.random.default_rng(0), 20_000), g)
        ref = reference_bin_weights(r, g)
        assert tv_distance(h, ref) < 0.03
        assert mode_count(h) == 9
        assert excluded_mass(h, ref) < 0.02


class TestLogMeanExp:
    def test_constant(self):
        est, _ = log_mean_exp(np.full(10, 3.0))
        assert est == pytest.approx(3.0)

    def test_matches_direct_and_is_stable(self):
        w = np.array([1000.0, 1001.0])
        est, _ = log_mean_exp(w)
        assert est == pytest.approx(1000.0 + math.log((1 + math.e) / 2))

    def test_bootstrap_stderr(self):
        rng = np.random.default_rng(0)
        _, se = log_mean_exp(rng.normal(size=5000) * 0.1, rng)
        assert 0.0005 < se < 0.005
        assert math.isnan(log_mean_exp(np.zeros(3))[1])


class TestEstimateLogZ:
    def test_exact_when_posterior_is_prior(self):
        # log r constant c and post = prior: every weight equals c
        net = init_drift_net(2, np.random.default_rng(0), (8,))
        post = PosteriorModel.from_prior(net)
        est, se = estimate_log_z(post, net, Schedule(T=5), lambda x: np.full(len(x), 1.3), np.random.default_rng(1), n=500)
        assert est == pytest.approx(1.3, abs=1e-10)
        assert se < 1e-10

    def test_gaussian_tilt(self):
        # zero-drift prior has x_1 ~ N(0, 5 I); with log r = a.x, Z = exp(5 |a|^2 / 2)
        net = init_drift_net(2, np.random.default_rng(0), (4,))
        for arr in net.arrays():
            arr[:] = 0.0
        post = PosteriorModel.from_prior(net)
        a = np.array([0.2, -0.1])
        est, se = estimate_log_z(post, net, Schedule(T=4), lambda x: x @ a, np.random.default_rng(2), n=40_000)
        truth = 5.0 * (a @ a) / 2
        assert abs(est - truth) < 4 * se + 1e-3

    def test_calibrated_on_enumerable_space(self):
        # same importance weights, on sequences whose log Z is known exactly
        rng = np.random.default_rng(3)
        prior = init_tabular(3, 4, rng)
        post = init_tabular(3, 4, rng, scale=0.5)
        r = default_seq_reward(3, 4, seed=1)
        exact = enumerate_posterior(prior, r)
        x = sample_ar(post, rng, 20_000)
        log_w = ar_log_prob(prior, x) + r.log_reward(x) - ar_log_prob(post, x)
        est, se = log_mean_exp(log_w, rng)
        assert abs(est - exact.log_z) < 4 * se
        assert len(all_sequences(3, 4)) == 81
