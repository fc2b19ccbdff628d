"""Closed-form densities for the 2D Gaussian-mixture posterior benchmark.

The prior is a uniform mixture of 25 unit-covariance Gaussians on the grid
{-10,-5,0,5,10}^2. The reward selects and reweights nine of those modes;
``log r`` is defined as the log density ratio so that prior * reward is
exactly the nine-mode unnormalized posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

_LOG_2PI = np.log(2.0 * np.pi)

GRID = np.array([-10.0, -5.0, 0.0, 5.0, 10.0])

POSTERIOR_MEANS = np.array(
    [[-10, -5], [-5, -10], [-5, 0], [10, -5], [0, 0], [0, 5], [5, -5], [5, 0], [5, 10]],
    dtype=float,
)
POSTERIOR_WEIGHTS = np.array([4, 10, 4, 5, 10, 5, 4, 15, 4], dtype=float)


def grid_means():
    xx, yy = np.meshgrid(GRID, GRID, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class GmmTarget:
    means: np.ndarray = field(default_factory=grid_means)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)

    @property
    def weights(self):
        k = len(self.means)
        return np.full(k, 1.0 / k)

    def to_dict(self):
        return {"means": self.means.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["means"], dtype=float))


@dataclass
class RewardSpec:
    means: np.ndarray = field(default_factory=lambda: POSTERIOR_MEANS.copy())
    weights: np.ndarray = field(default_factory=lambda: POSTERIOR_WEIGHTS.copy())
    beta: float = 1.0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("reward mixture weights must be positive")
        if len(self.means) != len(self.weights):
            raise ValueError("one weight per selected mean")

    @property
    def log_normalizer(self):
        """log of the total unnormalized posterior mass, sum of the weights."""
        return float(np.log(self.weights.sum()))

    def to_dict(self):
        return {
            "means": self.means.tolist(),
            "weights": self.weights.tolist(),
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["means"]), np.array(d["weights"]), float(d.get("beta", 1.0)))


def _component_logits(means, log_w, x):
    x = np.atleast_2d(x)
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return log_w[None, :] - 0.5 * d2 - 0.5 * x.shape[1] * _LOG_2PI


def _mixture_logpdf(means, log_w, x):
    single = np.ndim(x) == 1
    out = logsumexp(_component_logits(means, log_w, x), axis=1)
    return out[0] if single else out


def _mixture_grad(means, log_w, x):
    # grad of log sum_i w_i N(x; mu_i, I) = sum_i s_i mu_i - x, s = softmax
    x = np.atleast_2d(x)
    logits = _component_logits(means, log_w, x)
    s = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return s @ means - x


def prior_log_density(g: GmmTarget, x):
    return _mixture_logpdf(g.means, np.log(g.weights), x)


def prior_score(g: GmmTarget, x):
    """grad_x log p(x) of the prior mixture."""
    single = np.ndim(x) == 1
    out = _mixture_grad(g.means, np.log(g.weights), x)
    return out[0] if single else out


def unnorm_posterior_log_density(r: RewardSpec, x):
    """log sum_i w_i N(x; mu_i, I), unnormalized (integrates to sum w_i)."""
    return _mixture_logpdf(r.means, np.log(r.weights), x)


def log_reward(r: RewardSpec, g: GmmTarget, x):
    if r.beta == 0.0:
        return np.zeros(()) if np.ndim(x) == 1 else np.zeros(len(x))
    return r.beta * (unnorm_posterior_log_density(r, x) - prior_log_density(g, x))


def log_reward_grad(r: RewardSpec, g: GmmTarget, x):
    single = np.ndim(x) == 1
    if r.beta == 0.0:
        out = np.zeros(np.atleast_2d(x).shape)
    else:
        # the -x terms of the two mixture gradients cancel
        out = r.beta * (
            _mixture_grad(r.means, np.log(r.weights), x)
            - _mixture_grad(g.means, np.log(g.weights), x)
        )
    return out[0] if single else out


def prior_sample(g: GmmTarget, rng, n):
    idx = rng.integers(len(g.means), size=n)
    return g.means[idx] + rng.standard_normal((n, g.means.shape[1]))


def posterior_sample(r: RewardSpec, rng, n, g: GmmTarget | None = None):
    """Exact draws from the normalized posterior.

    Only beta in {0, 1} gives a Gaussian mixture; beta=0 is the prior and
    needs ``g``.
    """
    if r.beta == 0.0:
        if g is None:
            raise ValueError("beta=0 samples the prior; pass the GmmTarget")
        return prior_sample(g, rng, n)
    if r.beta != 1.0:
        raise ValueError("exact posterior sampling is only available for beta in {0, 1}")
    p = r.weights / r.weights.sum()
    idx = rng.choice(len(p), size=n, p=p)
    return r.means[idx] + rng.standard_normal((n, r.means.shape[1]))


def reference_bin_weights(r: RewardSpec, g: GmmTarget):
    """Posterior mass per prior mode (zero on modes the reward excludes)."""
    w = np.zeros(len(g.means))
    for mu, pi in zip(r.means, r.weights):
        k = int(np.argmin(((g.means - mu) ** 2).sum(1)))
        w[k] += pi
    return w / w.sum()
