"""Training loops for the GMM benchmark: prior pretraining, posterior
fine-tuning (RTB / VarGrad, on- or off-policy) and the RL baseline."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import Tape
from .baselines import CgConfig, RlConfig, cg_sample, reinforce_kl_step
from .config import RunConfig
from .diffusion import (
    DriftNet,
    Schedule,
    Trajectory,
    add_langevin_head,
    drift_eval,
    init_drift_net,
    sample_backward,
    sample_forward,
    traj_log_prob,
)
from .evaluate import (
    excluded_mass,
    log_mean_exp,
    mode_count,
    mode_histogram,
    tv_distance,
)
from .exploration import ExplorationSchedule, ReplayBuffer, offpolicy_batch
from .losses import (
    LossConfig,
    PosteriorModel,
    random_keep,
    rtb_loss,
    subsampled_rtb_grad,
    tb_loss,
    tb_residual,
    vargrad_rtb_loss,
    vargrad_values,
)
from .targets import (
    log_reward,
    log_reward_grad,
    posterior_sample,
    prior_log_density,
    prior_sample,
    prior_score,
    reference_bin_weights,
)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    net: DriftNet
    log_z: float
    metrics: list = field(default_factory=list)
    timing: list = field(default_factory=list)


def schedule_of(cfg: RunConfig):
    return Schedule(cfg.T, cfg.sigma2_total, 2)


def lr_at(cfg: RunConfig, k, total, peak=None):
    peak = cfg.lr if peak is None else peak
    if cfg.lr_schedule == "constant" or total == 0:
        return peak
    return cfg.lr_min + 0.5 * (peak - cfg.lr_min) * (1.0 + math.cos(math.pi * k / total))


def _eval_rng(cfg, k, stream):
    # evaluation draws never touch the training stream
    return np.random.default_rng([cfg.seed, stream, k])


def _check_loss(value, k):
    if not np.isfinite(value):
        raise DivergenceError(f"loss became non-finite at iteration {k}")


def late_times(rng, T, n):
    """Step indices with density proportional to 1/sqrt(1 - t).

    The drift is hardest to fit near t = 1, where it snaps samples onto
    the nearest mode, so those steps are visited more often.
    """
    return np.minimum((T * (1.0 - rng.random(n) ** 2)).astype(int), T - 1)


def bridge_regression_target(g, sched, x1, x_t, t):
    """Unbiased per-sample estimate of the optimal drift E[u | x_t].

    Blends the bridge target (x_1 - x_t) / (1 - t), noisy as t -> 1, with
    the score form (x_t + sigma^2 grad log p(x_1)) / t, noisy as t -> 0,
    using weight 1 - t on the former. Both have the same conditional mean.
    """
    s2 = sched.sigma2_total
    lam = (1.0 - t)[:, None]
    bridge = (x1 - x_t) / (1.0 - t)[:, None]
    score = (x_t + s2 * prior_score(g, x1)) / np.maximum(t, 1e-12)[:, None]
    return lam * bridge + (1.0 - lam) * score


def bridge_matching_loss(net, sched, g, rng, n_pairs, tape):
    """Regression of the drift onto noised true samples (x_1, t, x_t).

    Up to a constant this is the negative log-likelihood of noising
    trajectories under the model, averaged over time with
    late-emphasis sampling of the step.
    """
    x1 = prior_sample(g, rng, n_pairs)
    t = late_times(rng, sched.T, n_pairs) * sched.dt
    sd = np.sqrt(sched.sigma2_total * t * (1.0 - t))[:, None]
    x_t = t[:, None] * x1 + sd * rng.standard_normal(x1.shape)
    target = bridge_regression_target(g, sched, x1, x_t, t)
    u = drift_eval(net, x_t, t, tape=tape)
    return ad.scale(ad.vsum(ad.square(u - target)), 1.0 / (2.0 * sched.sigma2_total * n_pairs))


def fit_prior_log_z(net, sched, g, rng, n):
    """TB-optimal log Z for a fixed drift: minus the mean TB residual at log Z = 0."""
    x1 = prior_sample(g, rng, n)
    traj = sample_backward(sched, x1, rng)
    return float(-tb_residual(net, 0.0, sched, traj, prior_log_density(g, x1)).mean())


# --- prior ----------------------------------------------------------------


def pretrain_prior(cfg: RunConfig, progress=None) -> TrainResult:
    """Fit the prior diffusion model to true GMM samples.

    "mle": drift trained by bridge-matching regression; log Z is the
    TB-optimal value for the current drift, refitted at each evaluation.
    "tb": drift and log Z trained jointly by the trajectory balance loss
    on noising trajectories of true samples.
    """
    rng = np.random.default_rng(cfg.seed)
    sched = schedule_of(cfg)
    g = cfg.gmm
    net = init_drift_net(2, rng, cfg.hidden, cfg.n_fourier, activation=cfg.activation, compute_dtype=cfg.net_dtype)
    log_z = np.zeros(())
    params = net.arrays()
    opt = ad.adam_init(params, cfg.lr)
    opt_z = ad.adam_init([log_z], cfg.lr_log_z)
    uniform = np.full(len(g.means), 1.0 / len(g.means))
    result = TrainResult(net, 0.0)
    t0 = time.perf_counter()
    for k in range(cfg.pretrain_iters + 1):
        if k == cfg.pretrain_iters or (cfg.eval_every and k % cfg.eval_every == 0):
            if cfg.pretrain_objective == "mle":
                log_z[...] = fit_prior_log_z(net, sched, g, _eval_rng(cfg, k, 0), cfg.eval_samples)
            row = _eval_prior(cfg, net, log_z, sched, g, uniform, k)
            result.metrics.append(row)
            result.timing.append({"iteration": k, "wallclock": time.perf_counter() - t0})
            if progress:
                progress(row)
        if k == cfg.pretrain_iters:
            break
        opt.lr = lr_at(cfg, k, cfg.pretrain_iters)
        tape = Tape()
        if cfg.pretrain_objective == "tb":
            x1 = prior_sample(g, rng, cfg.batch_size)
            traj = sample_backward(sched, x1, rng)
            loss = tb_loss(net, log_z, sched, traj, prior_log_density(g, x1), tape)
            grads = ad.backward(tape, loss, params + [log_z])
            ad.adam_step(opt_z, [log_z], [grads.pop()])
        else:
            loss = bridge_matching_loss(net, sched, g, rng, cfg.pretrain_pairs, tape)
            grads = ad.backward(tape, loss, params)
        _check_loss(float(loss.value), k)
        ad.adam_step(opt, params, grads)
    result.log_z = float(log_z)
    return result


def _eval_prior(cfg, net, log_z, sched, g, uniform, k):
    rng = _eval_rng(cfg, k, 1)
    traj = sample_forward(net, sched, rng, cfg.eval_samples)
    h = mode_histogram(traj.terminal, g)
    x1 = prior_sample(g, rng, cfg.eval_samples)
    bt = sample_backward(sched, x1, rng)
    resid = tb_residual(net, 0.0, sched, bt, prior_log_density(g, x1))
    return {
        "iteration": k,
        "loss": float(np.mean((resid + float(log_z)) ** 2)),
        "log_z": float(log_z),
        "tv": tv_distance(h, uniform),
        "mode_count": mode_count(h),
        "min_mode_freq": float(h.freqs.min()),
        "path_kl": float(-resid.mean()),
    }


# --- posterior ------------------------------------------------------------


def make_posterior(prior: DriftNet, cfg: RunConfig):
    net = prior.copy()
    if cfg.langevin:
        net = add_langevin_head(net, np.random.default_rng([cfg.seed, 99]), cfg.hidden, cfg.activation)
    return PosteriorModel(net, np.zeros(()))


def _reward_fns(cfg):
    r, g = cfg.reward_spec, cfg.gmm
    return (lambda x: log_reward(r, g, x)), (lambda x: log_reward_grad(r, g, x))


def finetune_posterior(cfg: RunConfig, prior: DriftNet, progress=None) -> TrainResult:
    """Fine-tune a copy of the prior with RTB or relative VarGrad."""
    if cfg.method not in ("rtb", "vargrad"):
        raise ValueError("finetune_posterior handles rtb and vargrad")
    rng = np.random.default_rng([cfg.seed, 2])
    sched = schedule_of(cfg)
    r, g = cfg.reward_spec, cfg.gmm
    log_r_fn, grad_fn = _reward_fns(cfg)
    reward_grad = grad_fn if cfg.langevin else None
    post = make_posterior(prior, cfg)
    net_params = post.post_net.arrays()
    opt = ad.adam_init(net_params, cfg.tuning_lr)
    opt_z = ad.adam_init([post.log_z], cfg.lr_log_z)
    loss_cfg = LossConfig(cfg.clip_threshold, cfg.subsample_keep, cfg.method == "vargrad", cfg.langevin)
    horizon = cfg.finetune_iters if cfg.anneal_horizon is None else cfg.anneal_horizon
    explore = ExplorationSchedule(cfg.eps0, horizon, cfg.T)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    n_off = {"none": 0, "mixed": cfg.batch_size // 2, "only": cfg.batch_size}[cfg.offpolicy]
    source = buffer if cfg.offpolicy_source == "buffer" else (lambda rr, n: posterior_sample(r, rr, n, g))
    ref = reference_bin_weights(r, g)
    result = TrainResult(post.post_net, 0.0)
    t0 = time.perf_counter()
    loss_value = float("nan")
    for k in range(cfg.finetune_iters + 1):
        if k == cfg.finetune_iters or (cfg.eval_every and k % cfg.eval_every == 0):
            row = _eval_posterior(cfg, post, prior, sched, g, ref, log_r_fn, reward_grad, k)
            row["loss"] = loss_value
            result.metrics.append(row)
            result.timing.append({"iteration": k, "wallclock": time.perf_counter() - t0})
            if progress:
                progress(row)
        if k == cfg.finetune_iters:
            break
        opt.lr = lr_at(cfg, k, cfg.finetune_iters, cfg.tuning_lr)
        traj = _training_batch(cfg, post, sched, rng, n_off, source, buffer, explore, k, reward_grad, log_r_fn)
        lr_ = log_r_fn(traj.terminal)
        if cfg.method == "vargrad":
            tape = Tape()
            v = vargrad_values(prior, post, sched, traj, lr_, tape, reward_grad)
            loss = vargrad_rtb_loss(v)
            grads = ad.backward(tape, loss, net_params)
            loss_value = float(loss.value)
            post.log_z[...] = float(v.value.mean())
        elif loss_cfg.subsample_keep is not None:
            keep = random_keep(rng, sched.T, loss_cfg.subsample_keep)
            grads = subsampled_rtb_grad(prior, post, sched, traj, lr_, keep, reward_grad)
            gz = grads.pop()
            loss_value = rtb_loss(prior, post, sched, traj, lr_, LossConfig(0.0), None, reward_grad)
        else:
            tape = Tape()
            loss = rtb_loss(prior, post, sched, traj, lr_, loss_cfg, tape, reward_grad)
            grads = ad.backward(tape, loss, post.params())
            gz = grads.pop()
            loss_value = float(loss.value)
        _check_loss(loss_value, k)
        ad.adam_step(opt, net_params, grads)
        if cfg.method != "vargrad":
            ad.adam_step(opt_z, [post.log_z], [gz])
    result.log_z = float(post.log_z)
    result.posterior = post
    return result


def _training_batch(cfg, post, sched, rng, n_off, source, buffer, explore, k, reward_grad, log_r_fn):
    parts = []
    n_on = cfg.batch_size - n_off
    if isinstance(source, ReplayBuffer) and len(buffer) == 0:
        n_on, n_off = cfg.batch_size, 0
    if n_on:
        on = sample_forward(post.post_net, sched, rng, n_on, explore.current_extra_var(k), reward_grad)
        parts.append(on)
        if isinstance(source, ReplayBuffer):
            buffer.add(on.terminal, log_r_fn(on.terminal))
    if n_off:
        parts.append(offpolicy_batch(source, sched, rng, n_off))
    return Trajectory.concat(parts) if len(parts) > 1 else parts[0]


def _eval_posterior(cfg, post, prior, sched, g, ref, log_r_fn, reward_grad, k, n=None):
    rng = _eval_rng(cfg, k, 3)
    n = n or cfg.eval_samples
    traj = sample_forward(post.post_net, sched, rng, n, 0.0, reward_grad)
    x1 = traj.terminal
    h = mode_histogram(x1, g)
    log_w = log_r_fn(x1) + traj_log_prob(prior, sched, traj, None, reward_grad) - traj.behavior_log_prob.sum(1)
    log_z_is, _ = log_mean_exp(log_w)
    return {
        "iteration": k,
        "loss": float("nan"),
        "log_z": float(post.log_z),
        "tv": tv_distance(h, ref),
        "mode_count": mode_count(h),
        "excluded_mass": excluded_mass(h, ref),
        "logZ_IS": log_z_is,
    }


# --- RL baseline ------------------------------------------------------------


def train_rl(cfg: RunConfig, prior: DriftNet, kl_weight=None, progress=None) -> TrainResult:
    """REINFORCE fine-tuning of a prior copy with a per-step KL penalty."""
    alpha = cfg.kl_weight if kl_weight is None else kl_weight
    rl = RlConfig(alpha, cfg.batch_size, cfg.tuning_lr)
    rng = np.random.default_rng([cfg.seed, 4])
    sched = schedule_of(cfg)
    r, g = cfg.reward_spec, cfg.gmm
    log_r_fn, _ = _reward_fns(cfg)
    policy = prior.copy()
    opt = ad.adam_init(policy.arrays(), rl.lr)
    ref = reference_bin_weights(r, g)
    result = TrainResult(policy, float("nan"))
    wrapper = PosteriorModel(policy, np.zeros(()))
    t0 = time.perf_counter()
    info = {"reward": float("nan")}
    for k in range(cfg.finetune_iters + 1):
        if k == cfg.finetune_iters or (cfg.eval_every and k % cfg.eval_every == 0):
            row = _eval_posterior(cfg, wrapper, prior, sched, g, ref, log_r_fn, None, k)
            row["loss"] = -info["reward"]
            row["kl_weight"] = alpha
            result.metrics.append(row)
            result.timing.append({"iteration": k, "wallclock": time.perf_counter() - t0})
            if progress:
                progress(row)
        if k == cfg.finetune_iters:
            break
        opt.lr = lr_at(cfg, k, cfg.finetune_iters, cfg.tuning_lr)
        traj = sample_forward(policy, sched, rng, rl.batch_size)
        info = reinforce_kl_step(policy, prior, sched, traj, log_r_fn(traj.terminal), rl, opt)
        _check_loss(info["reward"], k)
    return result


def sample_cg(cfg: RunConfig, prior: DriftNet, n, rng=None):
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 5])
    _, grad_fn = _reward_fns(cfg)
    return cg_sample(prior, schedule_of(cfg), rng, n, grad_fn, CgConfig(cfg.cg_scale)).terminal
