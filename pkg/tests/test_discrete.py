import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from rtb import ad
from rtb.discrete import (
    DiscreteConfig,
    SeqReward,
    TabularAR,
    all_sequences,
    ar_log_prob,
    default_seq_reward,
    enumerate_posterior,
    exact_log_probs,
    export_tables,
    init_tabular,
    n_prefixes,
    prefix_indices,
    rtb_discrete_loss,
    rtb_discrete_residual,
    sample_ar,
    train_discrete,
    tv,
)


def brute_log_prob(m, seq):
    # walk the prefix tree explicitly
    total = 0.0
    for i in range(len(seq)):
        prefix = tuple(seq[:i])
        row = sum(m.V**k for k in range(i)) + sum(tok * m.V ** (i - 1 - j) for j, tok in enumerate(prefix))
        logits = m.logits[row]
        total += logits[seq[i]] - logsumexp(logits)
    return total


def posterior_tables(exact, V, L):
    """Tabular policy whose sequence law is exactly ``exact.probs``."""
    logits = np.full((n_prefixes(V, L), V), -np.inf)
    p = dict(zip(map(tuple, exact.seqs), exact.probs))
    for i in range(L):
        for prefix in itertools.product(range(V), repeat=i):
            row = prefix_indices(V, np.array([list(prefix) + [0] * (L - i)]))[0, i]
            mass = np.array(
                [sum(v for s, v in p.items() if s[: i + 1] == prefix + (a,)) for a in range(V)]
            )
            logits[row] = np.log(mass)
    return TabularAR(V, L, logits)


class TestTabular:
    def test_counts(self):
        assert n_prefixes(4, 6) == 1365
        assert len(all_sequences(4, 6)) == 4096
        assert n_prefixes(4, 7) == 5461 and 4**7 == 16384

    def test_all_sequences_lexicographic(self):
        s = all_sequences(2, 3)
        np.testing.assert_array_equal(s[[0, 1, -1]], [[0, 0, 0], [0, 0, 1], [1, 1, 1]])

    def test_prefix_indices_distinct(self):
        idx = prefix_indices(3, all_sequences(3, 3))
        assert len(np.unique(idx[:, 2])) == 9 and np.all(idx[:, 0] == 0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), V=st.integers(2, 4), L=st.integers(1, 4))
    def test_log_prob_matches_tree_walk(self, seed, V, L):
        rng = np.random.default_rng(seed)
        m = init_tabular(V, L, rng)
        seqs = rng.integers(V, size=(5, L))
        np.testing.assert_allclose(ar_log_prob(m, seqs), [brute_log_prob(m, s) for s in seqs], rtol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_normalized(self, seed):
        m = init_tabular(3, 4, np.random.default_rng(seed), scale=2.0)
        assert logsumexp(exact_log_probs(m)) == pytest.approx(0.0, abs=1e-12)

    def test_sampler_matches_exact_law(self):
        rng = np.random.default_rng(0)
        m = init_tabular(2, 3, rng)
        x = sample_ar(m, rng, 100_000)
        codes = x @ np.array([4, 2, 1])
        freqs = np.bincount(codes, minlength=8) / len(x)
        np.testing.assert_allclose(freqs, np.exp(exact_log_probs(m)), atol=0.006)

    def test_taped_log_prob_gradient(self):
        rng = np.random.default_rng(1)
        m = init_tabular(3, 3, rng)
        x = rng.integers(3, size=(4, 3))
        tape = ad.Tape()
        (g,) = ad.backward(tape, ad.vsum(ar_log_prob(m, x, tape)), [m.logits])
        h = 1e-6
        row = prefix_indices(3, x)[0, 1]
        m.logits[row, 2] += h
        fp = ar_log_prob(m, x).sum()
        m.logits[row, 2] -= 2 * h
        fm = ar_log_prob(m, x).sum()
        m.logits[row, 2] += h
        assert g[row, 2] == pytest.approx((fp - fm) / (2 * h), rel=1e-6)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            TabularAR(2, 3, np.zeros((3, 2)))
        with pytest.raises(ValueError):
            ar_log_prob(init_tabular(2, 3), np.zeros((1, 4), dtype=int))


class TestRtbDiscrete:
    def test_flat_reward_identical_tables(self):
        prior = init_tabular(3, 3, np.random.default_rng(0))
        r = SeqReward(0.0, np.zeros((3, 3)))
        x = all_sequences(3, 3)
        np.testing.assert_array_equal(rtb_discrete_loss(prior, prior.copy(), 0.0, x, r), 0.0)

    def test_oracle_optimum_has_zero_residual(self):
        V, L = 4, 6
        prior = init_tabular(V, L, np.random.default_rng(0))
        r = default_seq_reward(V, L)
        exact = enumerate_posterior(prior, r)
        post = posterior_tables(exact, V, L)
        loss = rtb_discrete_loss(prior, post, exact.log_z, exact.seqs, r)
        assert loss.max() < 1e-20

    def test_enumeration_oracle(self):
        prior = init_tabular(2, 3, np.random.default_rng(2))
        r = default_seq_reward(2, 3, seed=5)
        exact = enumerate_posterior(prior, r)
        joint = np.array([np.exp(brute_log_prob(prior, s) + r.log_reward(s[None])[0]) for s in all_sequences(2, 3)])
        assert exact.log_z == pytest.approx(np.log(joint.sum()), rel=1e-12)
        np.testing.assert_allclose(exact.probs, joint / joint.sum(), rtol=1e-10)

    def test_enumeration_size_limit(self):
        with pytest.raises(ValueError):
            enumerate_posterior(TabularAR(20, 5, np.zeros((n_prefixes(20, 5), 20))), SeqReward(0.0, np.zeros((5, 20))))

    def test_residual_taped(self):
        rng = np.random.default_rng(3)
        prior, post = init_tabular(3, 3, rng), init_tabular(3, 3, rng)
        r = default_seq_reward(3, 3)
        x = rng.integers(3, size=(6, 3))
        log_z = np.array(0.4)
        tape = ad.Tape()
        loss = rtb_discrete_loss(prior, post, log_z, x, r, tape)
        plain = rtb_discrete_residual(prior, post, log_z, x, r)
        assert float(loss.value) == pytest.approx(np.mean(plain**2))
        _, gz = ad.backward(tape, loss, [post.logits, log_z])
        assert float(gz) == pytest.approx(2 * plain.mean())

    def test_reward_counts_token_zero(self):
        r = SeqReward(2.0, np.zeros((3, 2)))
        np.testing.assert_array_equal(r.log_reward(np.array([[0, 0, 1], [1, 1, 1]])), [4.0, 0.0])

    def test_tv(self):
        assert tv([0.5, 0.5], [1.0, 0.0]) == 0.5


class TestTraining:
    def test_small_problem_converges(self):
        prior = init_tabular(3, 3, np.random.default_rng(0))
        r = default_seq_reward(3, 3)
        exact = enumerate_posterior(prior, r)
        res = train_discrete(prior, r, DiscreteConfig(iterations=1500, batch=128, check_every=500), exact)
        learned = np.exp(exact_log_probs(res.post))
        assert tv(learned, exact.probs) < 0.02
        assert abs(res.log_z - exact.log_z) < 0.02
        assert res.history[-1]["iteration"] == 1500

    def test_vargrad_agrees_with_log_z_variant(self):
        prior = init_tabular(3, 3, np.random.default_rng(1))
        r = default_seq_reward(3, 3, seed=2)
        exact = enumerate_posterior(prior, r)
        a = train_discrete(prior, r, DiscreteConfig(iterations=1500, batch=128, check_every=0), exact)
        b = train_discrete(prior, r, DiscreteConfig(iterations=1500, batch=128, use_vargrad=True, check_every=0), exact)
        pa, pb = np.exp(exact_log_probs(a.post)), np.exp(exact_log_probs(b.post))
        assert tv(pa, pb) < 2e-2
        assert abs(b.log_z - exact.log_z) < 0.03

    def test_export_tables(self, tmp_path):
        prior = init_tabular(2, 2, np.random.default_rng(0))
        exact = enumerate_posterior(prior, default_seq_reward(2, 2))
        path = tmp_path / "t.csv"
        export_tables(path, exact, exact.log_post)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("sequence,prior_prob") and len(lines) == 5
        assert sum(float(line.split(",")[3]) for line in lines[1:]) == pytest.approx(1.0)
