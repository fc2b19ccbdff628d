"""Comparison methods: KL-regularized REINFORCE fine-tuning and classifier
(energy) guidance of the prior drift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import Tape
from .diffusion import (
    DriftNet,
    Schedule,
    Trajectory,
    drift_eval,
    flat_steps,
    sample_forward,
)

# KL weights swept in the comparison figure
KL_SWEEP = (0.3, 0.5, 0.7, 0.8, 1.0)


@dataclass
class RlConfig:
    kl_weight: float = 0.5
    batch_size: int = 256
    lr: float = 1e-4

    def __post_init__(self):
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")


@dataclass
class CgConfig:
    scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.scale):
            raise ValueError("guidance scale must be finite")


def gaussian_kl_same_var(mean_a, mean_b, var):
    """KL(N(a, var I) || N(b, var I)) = |a - b|^2 / (2 var)."""
    return ((np.asarray(mean_a) - np.asarray(mean_b)) ** 2).sum(-1) / (2.0 * var)


def step_kl(u_policy, u_prior, sched: Schedule):
    """Per-step KL between policy and prior transitions from the same state.

    Means differ by (u_policy - u_prior) dt and share variance sigma^2 dt,
    so KL = |du|^2 dt / (2 sigma^2).
    """
    c = sched.dt / (2.0 * sched.sigma2_total)
    if isinstance(u_policy, ad.Var):
        return ad.scale(ad.vsum(ad.square(u_policy - u_prior), axis=1), c)
    return ((u_policy - u_prior) ** 2).sum(-1) * c


def reinforce_kl_grad(policy: DriftNet, prior: DriftNet, sched, traj: Trajectory, log_r, cfg: RlConfig):
    """Policy-gradient estimate for maximizing E[log r(x_1) - alpha * sum_i KL_i].

    Uses a leave-one-out batch-mean baseline for the score-function term and
    differentiates the per-step KL penalty directly. Returns (grads, info).
    """
    x_prev, x_next, t, n, k = flat_steps(sched, traj, None)
    tape = Tape()
    u = drift_eval(policy, x_prev, t, tape=tape)
    u0 = drift_eval(prior, x_prev, t)
    kl = ad.reshape(step_kl(u, u0, sched), (n, k))
    kl_sum = ad.vsum(kl, axis=1)
    resid = (x_next - x_prev) - ad.scale(u, sched.dt)
    lp = ad.scale(ad.vsum(ad.square(resid), axis=1), -0.5 / sched.step_var)
    lp_traj = ad.vsum(ad.reshape(lp, (n, k)), axis=1)

    reward = np.asarray(log_r) - cfg.kl_weight * kl_sum.value
    if n > 1:
        baseline = (reward.sum() - reward) / (n - 1)
    else:
        baseline = np.zeros(1)
    adv = reward - baseline
    surrogate = ad.scale(ad.vsum(lp_traj * adv), -1.0 / n)
    if cfg.kl_weight > 0:
        surrogate = surrogate + ad.scale(ad.vsum(kl_sum), cfg.kl_weight / n)
    grads = ad.backward(tape, surrogate, policy.arrays())
    info = {
        "reward": float(reward.mean()),
        "log_r": float(np.mean(log_r)),
        "kl": float(kl_sum.value.mean()),
    }
    return grads, info


def reinforce_kl_step(policy, prior, sched, traj, log_r, cfg: RlConfig, opt: ad.AdamState):
    grads, info = reinforce_kl_grad(policy, prior, sched, traj, log_r, cfg)
    info["applied"] = ad.adam_step(opt, policy.arrays(), grads)
    return info


def cg_drift(prior: DriftNet, sched: Schedule, x, t, reward_grad, cfg: CgConfig | None = None):
    """Prior drift plus scale * sigma^2 * grad log r(x), evaluated at the noisy state."""
    cfg = cfg or CgConfig()
    return drift_eval(prior, x, t) + cfg.scale * sched.sigma2_total * reward_grad(x)


def cg_sample(prior, sched, rng, n, reward_grad, cfg: CgConfig | None = None):
    cfg = cfg or CgConfig()
    return sample_forward(lambda x, t: cg_drift(prior, sched, x, t, reward_grad, cfg), sched, rng, n)
