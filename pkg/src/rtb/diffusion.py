"""Euler-Maruyama diffusion sampler with a fixed Brownian-bridge noising process.

States are indexed x_0 (fixed at the origin) ... x_T (the sample). Forward
transitions are Gaussian with mean x + u(x, t) dt and variance sigma^2 dt.
Trajectories are always handled in batches: ``states`` has shape
(n, T + 1, d).
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import MlpParams, Tape

_LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a drift or density evaluation produces NaN/inf."""


@dataclass(frozen=True)
class Schedule:
    T: int = 100
    sigma2_total: float = 5.0
    dim: int = 2

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"need at least 2 steps, got T={self.T}")
        if not self.sigma2_total > 0:
            raise ValueError("sigma2_total must be positive")

    @property
    def dt(self):
        return 1.0 / self.T

    @property
    def step_var(self):
        return self.sigma2_total * self.dt

    @property
    def times(self):
        """Start time of each transition, shape (T,)."""
        return np.arange(self.T) * self.dt


@dataclass
class Trajectory:
    states: np.ndarray
    behavior_log_prob: np.ndarray | None = None

    def __post_init__(self):
        if self.states.ndim == 2:
            self.states = self.states[None]
        if not np.all(np.isfinite(self.states)):
            raise NonFiniteError("trajectory contains non-finite states")

    def __len__(self):
        return self.states.shape[0]

    @property
    def terminal(self):
        return self.states[:, -1]

    @property
    def T(self):
        return self.states.shape[1] - 1

    def __getitem__(self, idx):
        blp = None if self.behavior_log_prob is None else self.behavior_log_prob[idx]
        return Trajectory(self.states[idx], blp)

    @staticmethod
    def concat(trajs):
        states = np.concatenate([t.states for t in trajs])
        if any(t.behavior_log_prob is None for t in trajs):
            return Trajectory(states)
        return Trajectory(states, np.concatenate([t.behavior_log_prob for t in trajs]))

    def to_csv(self, path, index=0):
        """Write one trajectory as rows (step, x_1, ..., x_d)."""
        states = self.states[index]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"x_{j + 1}" for j in range(states.shape[1])])
            for i, row in enumerate(states):
                w.writerow([i] + [repr(float(v)) for v in row])


# --- drift network --------------------------------------------------------


def fourier_features(t, n_features=8):
    """sin/cos of t at frequencies pi * 2^k, k < n_features/2; shape (n, n_features)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    freqs = math.pi * 2.0 ** np.arange(n_features // 2)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class DriftNet:
    base: MlpParams
    langevin_head: MlpParams | None = None
    n_fourier: int = 8
    # fixed (untrained) rescaling of the state input and of the drift output
    x_scale: float = 1.0
    out_scale: float = 1.0

    @property
    def langevin(self):
        return self.langevin_head is not None

    @property
    def dim(self):
        return self.base.sizes[-1]

    def arrays(self):
        out = self.base.arrays()
        if self.langevin_head is not None:
            out += self.langevin_head.arrays()
        return out

    def copy(self):
        head = None if self.langevin_head is None else self.langevin_head.copy()
        return DriftNet(self.base.copy(), head, self.n_fourier, self.x_scale, self.out_scale)


def init_drift_net(
    dim, rng, hidden=(64, 64), n_fourier=8, langevin=False, activation="gelu", x_scale=1.0, out_scale=1.0,
    compute_dtype="float64",
):
    sizes = [dim + n_fourier, *hidden, dim]
    base = ad.init_mlp(sizes, rng, activation, compute_dtype=compute_dtype)
    net = DriftNet(base, None, n_fourier, x_scale, out_scale)
    if langevin:
        net = add_langevin_head(net, rng, hidden, activation)
    return net


def add_langevin_head(net: DriftNet, rng, hidden=(64, 64), activation="gelu"):
    """Copy of ``net`` with a scalar head whose output starts at exactly 0."""
    sizes = [net.dim + net.n_fourier, *hidden, 1]
    head = ad.init_mlp(sizes, rng, activation, zero_last=True, compute_dtype=net.base.compute_dtype)
    return DriftNet(net.base.copy(), head, net.n_fourier, net.x_scale, net.out_scale)


def _net_input(net, x, t):
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return np.concatenate([x * net.x_scale, fourier_features(t, net.n_fourier)], axis=1)


def drift_eval(net: DriftNet, x, t, log_reward_grad=None, tape: Tape | None = None):
    """Drift u(x, t): NN_1, plus NN_2 * grad log r in Langevin mode.

    ``x`` is (n, d); ``t`` scalar or (n,). Returns an array, or a Var when
    a tape is given.
    """
    if net.langevin and log_reward_grad is None:
        raise ValueError("Langevin drift needs the reward gradient")
    inp = _net_input(net, x, t)
    if tape is None:
        out = ad.mlp_apply(net.base, inp) * net.out_scale
        if net.langevin:
            out = out + ad.mlp_apply(net.langevin_head, inp) * np.atleast_2d(log_reward_grad)
        return out
    out = ad.mlp_forward(net.base, inp, tape)
    if net.out_scale != 1.0:
        out = ad.scale(out, net.out_scale)
    if net.langevin:
        out = out + ad.mlp_forward(net.langevin_head, inp, tape) * np.atleast_2d(log_reward_grad)
    return out


DriftFn = Callable[[np.ndarray, float], np.ndarray]


def as_drift_fn(net, reward_grad: Callable | None = None) -> DriftFn:
    """Wrap a DriftNet (or pass through a callable) as drift(x, t) -> array."""
    if not isinstance(net, DriftNet):
        return net
    if net.langevin:
        if reward_grad is None:
            raise ValueError("Langevin drift needs reward_grad")
        return lambda x, t: drift_eval(net, x, t, reward_grad(x))
    return lambda x, t: drift_eval(net, x, t)


def gaussian_step_log_prob(x_next, mean, var):
    """log N(x_next; mean, var I) summed over the last axis."""
    d = x_next.shape[-1]
    return -0.5 * ((x_next - mean) ** 2).sum(-1) / var - 0.5 * d * (_LOG_2PI + math.log(var))


# --- forward process ------------------------------------------------------


def sample_forward(net, sched: Schedule, rng, n, extra_var=0.0, reward_grad=None):
    """Sample n denoising trajectories from the origin.

    ``extra_var`` is added to each step's variance (exploration); the
    cached behavior log-prob uses the actual sampling variance.
    """
    if extra_var < 0:
        raise ValueError("extra_var must be nonnegative")
    drift = as_drift_fn(net, reward_grad)
    var = sched.step_var + extra_var
    sd = math.sqrt(var)
    states = np.zeros((n, sched.T + 1, sched.dim))
    blp = np.empty((n, sched.T))
    noise = rng.standard_normal((sched.T, n, sched.dim))
    x = states[:, 0]
    for i, t in enumerate(sched.times):
        u = drift(x, t)
        if not np.all(np.isfinite(u)):
            raise NonFiniteError(f"non-finite drift at step {i}")
        mean = x + u * sched.dt
        x = mean + sd * noise[i]
        states[:, i + 1] = x
        blp[:, i] = gaussian_step_log_prob(x, mean, var)
    return Trajectory(states, blp)


def flat_steps(sched, traj, steps):
    s = traj.states
    if s.shape[1] != sched.T + 1 or s.shape[2] != sched.dim:
        raise ValueError(f"trajectory shape {s.shape[1:]} does not match schedule")
    steps = np.arange(sched.T) if steps is None else np.asarray(steps)
    n, k = s.shape[0], len(steps)
    x_prev = s[:, steps].reshape(n * k, -1)
    x_next = s[:, steps + 1].reshape(n * k, -1)
    t = np.tile(sched.times[steps], n)
    return x_prev, x_next, t, n, k


def step_log_probs(net, sched: Schedule, traj: Trajectory, tape=None, reward_grad=None, steps=None):
    """Per-step forward log-densities, shape (n, len(steps)).

    ``net`` may also be a plain drift callable (x, t) -> u when no tape is used.
    With a tape the result is a Var differentiable in the net parameters.
    """
    x_prev, x_next, t, n, k = flat_steps(sched, traj, steps)
    if isinstance(net, DriftNet):
        g = reward_grad(x_prev) if net.langevin else None
        u = drift_eval(net, x_prev, t, g, tape)
    elif tape is None:
        u = net(x_prev, t)
    else:
        raise TypeError("only a DriftNet can be differentiated")
    v, dt, d = sched.step_var, sched.dt, sched.dim
    const = -0.5 * d * (_LOG_2PI + math.log(v))
    if tape is None:
        lp = -0.5 * ((x_next - x_prev - u * dt) ** 2).sum(-1) / v + const
        if not np.all(np.isfinite(lp)):
            raise NonFiniteError("non-finite transition log-density")
        return lp.reshape(n, k)
    resid = (x_next - x_prev) - ad.scale(u, dt)
    lp = ad.scale(ad.vsum(ad.square(resid), axis=1), -0.5 / v) + const
    if not np.all(np.isfinite(lp.value)):
        raise NonFiniteError("non-finite transition log-density")
    return ad.reshape(lp, (n, k))


def traj_log_prob(net, sched: Schedule, traj: Trajectory, tape=None, reward_grad=None, steps=None):
    """sum_i log N(x_i; x_{i-1} + u dt, sigma^2 dt I) per trajectory, shape (n,).

    log p(x_0) is omitted: x_0 is a fixed point.
    """
    lp = step_log_probs(net, sched, traj, tape, reward_grad, steps)
    return lp.sum(axis=1)


# --- backward (noising) process ------------------------------------------


def bridge_step_params(sched: Schedule, i):
    """Mean coefficient and variance of x_{i-1} | x_i under the bridge to the origin."""
    c = (i - 1) / i
    return c, sched.step_var * c


def sample_backward(sched: Schedule, x1, rng):
    """Noise terminal states back to the origin along a Brownian bridge.

    Returns trajectories in forward orientation; ``behavior_log_prob`` holds
    the per-step backward log-densities (steps i = 2..T; the i = 1 step is
    deterministic and contributes 0).
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    n, d = x1.shape
    states = np.zeros((n, sched.T + 1, d))
    states[:, -1] = x1
    blp = np.zeros((n, sched.T))
    noise = rng.standard_normal((sched.T, n, d))
    for i in range(sched.T, 1, -1):
        c, var = bridge_step_params(sched, i)
        mean = c * states[:, i]
        states[:, i - 1] = mean + math.sqrt(var) * noise[i - 1]
        blp[:, i - 1] = gaussian_step_log_prob(states[:, i - 1], mean, var)
    return Trajectory(states, blp)


def backward_log_prob(sched: Schedule, traj: Trajectory):
    """log q(x_0, ..., x_{T-1} | x_T) per trajectory, shape (n,)."""
    s = traj.states
    if s.shape[1] != sched.T + 1:
        raise ValueError("trajectory length does not match schedule")
    total = np.zeros(s.shape[0])
    for i in range(2, sched.T + 1):
        c, var = bridge_step_params(sched, i)
        total += gaussian_step_log_prob(s[:, i - 1], c * s[:, i], var)
    if not np.all(np.isfinite(total)):
        raise NonFiniteError("non-finite backward log-density")
    return total
