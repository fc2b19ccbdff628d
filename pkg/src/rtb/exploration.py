"""Off-policy training helpers: annealed exploration noise, a FIFO replay
buffer, and noising trajectories built from known terminal samples."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .diffusion import Schedule, Trajectory, sample_backward


@dataclass
class ExplorationSchedule:
    eps0: float = 0.5
    horizon: int = 5000
    T: int = 100

    def __post_init__(self):
        if self.eps0 < 0 or self.horizon < 0:
            raise ValueError("eps0 and horizon must be nonnegative")

    def eps(self, k):
        if self.horizon == 0:
            return 0.0
        return self.eps0 * max(0.0, 1.0 - k / self.horizon)

    def current_extra_var(self, k):
        """Variance eps(k)^2 / T added to every forward step at iteration k."""
        return self.eps(k) ** 2 / self.T


def current_extra_var(s: ExplorationSchedule, k):
    return s.current_extra_var(k)


class ReplayBuffer:
    """Fixed-capacity FIFO store of terminal samples and their log-rewards."""

    def __init__(self, capacity=10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._x: deque = deque(maxlen=capacity)
        self._log_r: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._x)

    def add(self, x, log_r):
        x = np.atleast_2d(x)
        log_r = np.atleast_1d(log_r)
        if len(x) != len(log_r):
            raise ValueError("one log-reward per sample")
        for xi, li in zip(x, log_r):
            self._x.append(np.array(xi))
            self._log_r.append(float(li))

    def contents(self):
        if not self._x:
            return np.empty((0, 0)), np.empty(0)
        return np.stack(self._x), np.array(self._log_r)

    def sample(self, rng, n):
        if not self._x:
            raise ValueError("cannot sample from an empty replay buffer")
        x, log_r = self.contents()
        idx = rng.integers(len(x), size=n)
        return x[idx], log_r[idx]


def offpolicy_batch(source, sched: Schedule, rng, n) -> Trajectory:
    """n noising trajectories ending at terminals drawn from ``source``.

    ``source`` is a ReplayBuffer or a callable ``(rng, n) -> (n, d) array``
    such as an exact posterior sampler.
    """
    if isinstance(source, ReplayBuffer):
        x1, _ = source.sample(rng, n)
    else:
        x1 = source(rng, n)
    if len(x1) == 0:
        raise ValueError("off-policy source produced no samples")
    return sample_backward(sched, x1, rng)
