"""Metrics against analytic ground truth: mode histograms, total variation,
mode counts and importance-sampled log-partition estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .diffusion import sample_forward, traj_log_prob
from .targets import GmmTarget


@dataclass
class ModeHistogram:
    counts: np.ndarray
    total: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.sum() != self.total:
            raise ValueError("histogram counts must sum to total")

    @property
    def freqs(self):
        return self.counts / max(self.total, 1)


def mode_histogram(samples, g: GmmTarget) -> ModeHistogram:
    """Assign each sample to its nearest prior mean."""
    samples = np.atleast_2d(samples)
    d2 = ((samples[:, None, :] - g.means[None, :, :]) ** 2).sum(-1)
    counts = np.bincount(np.argmin(d2, axis=1), minlength=len(g.means))
    return ModeHistogram(counts, len(samples))


def _as_probs(h):
    return h.freqs if isinstance(h, ModeHistogram) else np.asarray(h, dtype=float)


def tv_distance(h, reference):
    return 0.5 * float(np.abs(_as_probs(h) - _as_probs(reference)).sum())


def mode_count(h: ModeHistogram, threshold=0.01):
    return int(np.sum(_as_probs(h) >= threshold))


def excluded_mass(h, reference):
    """Mass the histogram puts on bins where the reference has none."""
    return float(_as_probs(h)[_as_probs(reference) == 0].sum())


def log_mean_exp(log_w, rng=None, n_boot=200):
    """log mean exp(log_w) with a bootstrap standard error (nan if rng is None)."""
    log_w = np.asarray(log_w, dtype=float)
    est = float(logsumexp(log_w) - np.log(len(log_w)))
    if rng is None or n_boot < 2:
        return est, float("nan")
    idx = rng.integers(len(log_w), size=(n_boot, len(log_w)))
    boots = logsumexp(log_w[idx], axis=1) - np.log(len(log_w))
    return est, float(np.std(boots, ddof=1))


def estimate_log_z(post, prior, sched, log_r_fn, rng, n=10_000, reward_grad=None, n_boot=200, batch=2_000):
    """Importance-sampling estimate of log Z from on-policy posterior trajectories.

    Weights are log r(x_1) + log p_prior(tau) - log p_post(tau). Returns
    (estimate, bootstrap stderr).
    """
    log_w = []
    left = n
    while left > 0:
        m = min(batch, left)
        traj = sample_forward(post.post_net, sched, rng, m, reward_grad=reward_grad)
        lw = log_r_fn(traj.terminal) + traj_log_prob(prior, sched, traj, None, reward_grad)
        log_w.append(lw - traj.behavior_log_prob.sum(axis=1))
        left -= m
    return log_mean_exp(np.concatenate(log_w), rng, n_boot)
