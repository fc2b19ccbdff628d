"""Run configuration, named profiles and JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .targets import GmmTarget, RewardSpec

# Benchmark hyperparameters: batch 500, lr 1e-4, 100 steps, total variance 5,
# 10k pretraining and 5k fine-tuning iterations, exploration eps 0.5, clip 0.1.
PROFILES = {
    "paper": dict(
        T=100, batch_size=500, lr=1e-4, lr_min=1e-4, lr_schedule="constant",
        pretrain_iters=10_000, finetune_iters=5_000,
    ),
    "fast": dict(
        T=100, batch_size=256, lr=2e-3, lr_min=1e-4, lr_schedule="cosine",
        pretrain_iters=3_000, finetune_iters=2_000, finetune_lr=1e-3,
        net_dtype="float32", offpolicy="mixed",
    ),
}


@dataclass
class RunConfig:
    command: str = "finetune"
    seed: int = 0
    profile: str = "fast"
    out: str = "runs/default"

    # schedule / network
    T: int = 100
    sigma2_total: float = 5.0
    hidden: tuple = (128, 128, 128)
    activation: str = "gelu"
    n_fourier: int = 8
    net_dtype: str = "float64"

    # optimization
    batch_size: int = 256
    lr: float = 2e-3
    lr_min: float = 1e-4
    lr_schedule: str = "cosine"
    finetune_lr: float | None = None  # None: reuse lr
    lr_log_z: float = 0.1
    pretrain_iters: int = 3_000
    finetune_iters: int = 2_000
    pretrain_objective: str = "mle"
    pretrain_pairs: int = 4_096

    # fine-tuning objective
    method: str = "rtb"
    clip_threshold: float = 0.1
    subsample_keep: int | None = None
    langevin: bool = False
    offpolicy: str = "none"
    offpolicy_source: str = "posterior"
    buffer_capacity: int = 10_000
    eps0: float = 0.5
    anneal_horizon: int | None = None

    # baselines
    kl_weight: float = 0.5
    kl_sweep: tuple = ()
    cg_scale: float = 1.0

    # evaluation
    eval_every: int = 100
    eval_samples: int = 2_000
    final_samples: int = 10_000

    # discrete toy
    vocab: int = 4
    length: int = 6
    discrete_iters: int = 4_000
    discrete_lr: float = 0.05

    target: dict = field(default_factory=lambda: GmmTarget().to_dict())
    reward: dict = field(default_factory=lambda: RewardSpec().to_dict())

    def __post_init__(self):
        if self.method not in ("rtb", "vargrad", "rl", "cg"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.offpolicy not in ("none", "mixed", "only"):
            raise ValueError(f"unknown offpolicy mode {self.offpolicy!r}")
        if self.offpolicy_source not in ("posterior", "buffer"):
            raise ValueError(f"unknown offpolicy source {self.offpolicy_source!r}")
        if self.net_dtype not in ("float64", "float32"):
            raise ValueError(f"unknown net dtype {self.net_dtype!r}")
        if self.pretrain_objective not in ("mle", "tb"):
            raise ValueError(f"unknown pretrain objective {self.pretrain_objective!r}")
        if self.subsample_keep is not None and not 1 <= self.subsample_keep <= self.T:
            raise ValueError("subsample_keep must lie in [1, T]")
        self.hidden = tuple(self.hidden)
        self.kl_sweep = tuple(self.kl_sweep)

    @property
    def tuning_lr(self):
        return self.lr if self.finetune_lr is None else self.finetune_lr

    @property
    def gmm(self):
        return GmmTarget.from_dict(self.target)

    @property
    def reward_spec(self):
        return RewardSpec.from_dict(self.reward)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def make_config(profile="fast", overrides=None, **kwargs):
    """Profile defaults, then ``overrides`` (e.g. a loaded JSON), then kwargs."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    values = dict(PROFILES[profile], profile=profile)
    values.update(overrides or {})
    values.update({k: v for k, v in kwargs.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)


def load_config(path):
    with open(path) as f:
        return json.load(f)
