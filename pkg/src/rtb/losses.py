"""Balance objectives: TB for prior training, RTB and its VarGrad form for
posterior fine-tuning, and two memory-saving RTB gradient estimators.

Residual helpers return one value per trajectory; ``*_loss`` functions
return the batch mean. With ``tape=None`` everything is plain numpy; with a
tape the result is a Var whose gradient flows into the posterior (or, for
TB, the trained) network and ``log_z``. The prior is always evaluated off
the tape, so it never receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import Tape
from .diffusion import DriftNet, backward_log_prob, step_log_probs, traj_log_prob


@dataclass
class PosteriorModel:
    post_net: DriftNet
    log_z: np.ndarray = field(default_factory=lambda: np.zeros(()))

    def __post_init__(self):
        self.log_z = np.asarray(self.log_z, dtype=float).reshape(())

    def params(self):
        return self.post_net.arrays() + [self.log_z]

    @classmethod
    def from_prior(cls, prior: DriftNet, log_z=0.0):
        return cls(prior.copy(), np.array(float(log_z)))


@dataclass
class LossConfig:
    clip_threshold: float = 0.1
    subsample_keep: int | None = None  # None keeps all T steps
    use_vargrad: bool = False
    use_langevin: bool = False

    def __post_init__(self):
        if self.clip_threshold < 0:
            raise ValueError("clip_threshold must be >= 0")
        if self.subsample_keep is not None and self.subsample_keep < 1:
            raise ValueError("subsample_keep must be >= 1")


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(ad.value(x))):
            raise FloatingPointError("non-finite input to balance loss")


def _log_z_term(log_z, tape):
    return tape.var(log_z) if tape is not None else np.asarray(log_z, dtype=float)


# --- trajectory balance (prior training) --------------------------------


def tb_residual(net, log_z, sched, traj, target_log_density, tape=None, reward_grad=None):
    """log Z + log p(tau) - log target(x_1) - log q(tau | x_1)."""
    _check_finite(log_z, target_log_density)
    lp = traj_log_prob(net, sched, traj, tape, reward_grad)
    return _log_z_term(log_z, tape) + lp - (target_log_density + backward_log_prob(sched, traj))


def tb_loss(net, log_z, sched, traj, target_log_density, tape=None, reward_grad=None):
    d = tb_residual(net, log_z, sched, traj, target_log_density, tape, reward_grad)
    if tape is None:
        return float(np.mean(d**2))
    return ad.scale(ad.vsum(ad.square(d)), 1.0 / len(traj))


# --- relative trajectory balance ------------------------------------------


def rtb_residual(prior, post: PosteriorModel, sched, traj, log_r, tape=None, reward_grad=None):
    """delta = log Z + log p_post(tau) - log r(x_1) - log p_prior(tau)."""
    _check_finite(log_r)
    lp_prior = traj_log_prob(prior, sched, traj, None, reward_grad)
    lp_post = traj_log_prob(post.post_net, sched, traj, tape, reward_grad)
    return _log_z_term(post.log_z, tape) + lp_post - (log_r + lp_prior)


def clip_mask(delta, threshold):
    """1 where delta^2 >= threshold (trajectory trains), 0 where it is skipped."""
    return (np.asarray(delta) ** 2 >= threshold).astype(float)


def rtb_loss(prior, post, sched, traj, log_r, cfg: LossConfig | None = None, tape=None, reward_grad=None):
    """Batch mean of delta^2, zeroed on trajectories with delta^2 < clip threshold."""
    cfg = cfg or LossConfig()
    d = rtb_residual(prior, post, sched, traj, log_r, tape, reward_grad)
    mask = clip_mask(ad.value(d), cfg.clip_threshold)
    if tape is None:
        return float(np.mean(mask * d**2))
    return ad.scale(ad.vsum(ad.square(d) * mask), 1.0 / len(traj))


def vargrad_values(prior, post, sched, traj, log_r, tape=None, reward_grad=None):
    """Per-trajectory log Z estimates log p_prior + log r - log p_post."""
    _check_finite(log_r)
    lp_prior = traj_log_prob(prior, sched, traj, None, reward_grad)
    lp_post = traj_log_prob(post.post_net, sched, traj, tape, reward_grad)
    return (lp_prior + log_r) - lp_post


def vargrad_rtb_loss(v):
    """Biased sample variance (1/K) sum (v_k - mean v)^2 of per-trajectory values."""
    k = ad.value(v).shape[0]
    if k < 2:
        raise ValueError("VarGrad needs at least 2 trajectories")
    if not isinstance(v, ad.Var):
        v = np.asarray(v, dtype=float)
        return float(np.mean((v - v.mean()) ** 2))
    centered = v - ad.scale(ad.vsum(v), 1.0 / k)
    return ad.scale(ad.vsum(ad.square(centered)), 1.0 / k)


def rtb_grad(prior, post, sched, traj, log_r, cfg=None, reward_grad=None):
    """Direct autodiff gradient of ``rtb_loss`` w.r.t. ``post.params()``."""
    tape = Tape()
    loss = rtb_loss(prior, post, sched, traj, log_r, cfg, tape, reward_grad)
    return ad.backward(tape, loss, post.params())


# --- memory-saving estimators ---------------------------------------------


def random_keep(rng, T, k):
    """Uniformly random set of k distinct step indices (0-based)."""
    return np.sort(rng.choice(T, size=k, replace=False))


def subsampled_rtb_grad(prior, post, sched, traj, log_r, keep, reward_grad=None):
    """Unclipped RTB gradient with backprop restricted to steps in ``keep``.

    The residual uses all T steps (held constant); kept step log-likelihood
    gradients are rescaled by T/|keep|, and log Z gets its full gradient.
    """
    keep = np.asarray(keep)
    if keep.size == 0:
        raise ValueError("keep set must be nonempty")
    delta = rtb_residual(prior, post, sched, traj, log_r, None, reward_grad)
    tape = Tape()
    lp_kept = step_log_probs(post.post_net, sched, traj, tape, reward_grad, steps=keep)
    lp_kept = ad.scale(ad.vsum(lp_kept, axis=1), sched.T / keep.size)
    n = len(traj)
    surrogate = ad.scale(ad.vsum(lp_kept * (2.0 * delta)), 1.0 / n)
    surrogate = surrogate + tape.var(post.log_z) * float(2.0 * delta.mean())
    return ad.backward(tape, surrogate, post.params())


def two_pass_rtb_grad(prior, post, sched, traj, log_r, chunk=None, reward_grad=None):
    """Unclipped RTB gradient as 2 delta * grad(log Z + sum_i log p_post(step i)).

    delta comes from a first, gradient-free pass; the second pass visits
    steps in chunks of ``chunk`` and keeps only one chunk's tape alive.
    """
    T = sched.T
    chunk = T if chunk is None else int(chunk)
    if chunk < 1:
        raise ValueError("chunk size must be >= 1")
    delta = rtb_residual(prior, post, sched, traj, log_r, None, reward_grad)
    weight = 2.0 * delta / len(traj)
    params = post.params()
    grads = [np.zeros_like(p) for p in params]
    for start in range(0, T, chunk):
        steps = np.arange(start, min(start + chunk, T))
        tape = Tape()
        lp = step_log_probs(post.post_net, sched, traj, tape, reward_grad, steps=steps)
        g = ad.backward(tape, ad.vsum(ad.vsum(lp, axis=1) * weight), params)
        for acc, gi in zip(grads, g):
            acc += gi
    grads[-1] = grads[-1] + weight.sum()
    return grads


# --- RTB as TB under the prior's reference measure ------------------------


def reference_tb_residual(prior, post, sched, traj, log_r, reward_grad=None):
    """TB residual with densities taken relative to the prior's path measure.

    Forward density: p_post / p_prior. Backward density: q / q, with the
    noising process itself as the backward reference. Target density:
    r(x_1)/Z relative to the prior marginal.
    """
    log_fwd = traj_log_prob(post.post_net, sched, traj, None, reward_grad) - traj_log_prob(
        prior, sched, traj, None, reward_grad
    )
    log_q = backward_log_prob(sched, traj)
    log_bwd = log_q - backward_log_prob(sched, traj)
    return (float(post.log_z) + log_fwd) - (np.asarray(log_r) + log_bwd)
