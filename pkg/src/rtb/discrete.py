"""RTB for autoregressive sequence models on a fully enumerable space.

A :class:`TabularAR` keeps one logit vector per prefix, so the exact
sequence distribution, and the exact posterior under any reward, can be
enumerated. That makes this module the exactness check for the claim that
a zero RTB residual on every sequence yields the posterior.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import ad
from .ad import Tape


def n_prefixes(V, L):
    """Number of prefixes of length 0..L-1."""
    return sum(V**i for i in range(L))


def prefix_offsets(V, L):
    return np.array([sum(V**k for k in range(i)) for i in range(L)], dtype=np.int64)


def prefix_indices(V, seqs):
    """Table row of the prefix preceding each position, shape (n, L)."""
    seqs = np.atleast_2d(seqs)
    n, L = seqs.shape
    offsets = prefix_offsets(V, L)
    idx = np.empty((n, L), dtype=np.int64)
    code = np.zeros(n, dtype=np.int64)
    for i in range(L):
        idx[:, i] = offsets[i] + code
        code = code * V + seqs[:, i]
    return idx


def all_sequences(V, L):
    """Every length-L sequence in lexicographic order, shape (V**L, L)."""
    grids = np.indices((V,) * L).reshape(L, -1).T
    return grids.astype(np.int64)


@dataclass
class TabularAR:
    V: int
    L: int
    logits: np.ndarray

    def __post_init__(self):
        expected = (n_prefixes(self.V, self.L), self.V)
        if self.logits.shape != expected:
            raise ValueError(f"logits shape {self.logits.shape}, expected {expected}")

    def copy(self):
        return TabularAR(self.V, self.L, self.logits.copy())


def init_tabular(V, L, rng=None, scale=1.0):
    """Random logits N(0, scale^2); uniform policy when rng is None or scale is 0."""
    shape = (n_prefixes(V, L), V)
    if rng is None or scale == 0:
        return TabularAR(V, L, np.zeros(shape))
    return TabularAR(V, L, scale * rng.standard_normal(shape))


def ar_log_prob(m: TabularAR, x, tape: Tape | None = None):
    """sum_i log softmax(logits[prefix_i])[x_i] for each sequence in x."""
    x = np.atleast_2d(x)
    n, L = x.shape
    if L != m.L:
        raise ValueError(f"sequence length {L} != model length {m.L}")
    idx = prefix_indices(m.V, x).ravel()
    flat_x = x.ravel()
    if tape is None:
        rows = m.logits[idx]
        lp = rows[np.arange(len(idx)), flat_x] - logsumexp(rows, axis=1)
        return lp.reshape(n, L).sum(1)
    rows = ad.getitem(tape.var(m.logits), idx)
    picked = ad.getitem(rows, (np.arange(len(idx)), flat_x))
    lp = picked - ad.logsumexp(rows, axis=1)
    return ad.vsum(ad.reshape(lp, (n, L)), axis=1)


def sample_ar(m: TabularAR, rng, n):
    seqs = np.zeros((n, m.L), dtype=np.int64)
    offsets = prefix_offsets(m.V, m.L)
    code = np.zeros(n, dtype=np.int64)
    for i in range(m.L):
        rows = m.logits[offsets[i] + code]
        p = np.exp(rows - logsumexp(rows, axis=1, keepdims=True))
        u = rng.random(n)[:, None]
        tok = np.minimum((np.cumsum(p, axis=1) < u).sum(1), m.V - 1)
        seqs[:, i] = tok
        code = code * m.V + tok
    return seqs


def exact_log_probs(m: TabularAR):
    """log-probabilities of all V**L sequences, in ``all_sequences`` order."""
    return ar_log_prob(m, all_sequences(m.V, m.L))


@dataclass
class SeqReward:
    """log r(x) = a * (number of token-0 positions) + sum_i table[i, x_i]."""

    a: float
    table: np.ndarray

    def log_reward(self, x):
        x = np.atleast_2d(x)
        L = x.shape[1]
        return self.a * (x == 0).sum(1) + self.table[np.arange(L)[None, :], x].sum(1)


def default_seq_reward(V=4, L=6, a=1.0, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return SeqReward(a, scale * rng.standard_normal((L, V)))


@dataclass
class ExactPosterior:
    seqs: np.ndarray
    log_prior: np.ndarray
    log_r: np.ndarray
    log_post: np.ndarray
    log_z: float

    @property
    def probs(self):
        return np.exp(self.log_post)


def enumerate_posterior(m: TabularAR, r: SeqReward) -> ExactPosterior:
    if m.V**m.L > 10**6:
        raise ValueError("sequence space too large to enumerate")
    seqs = all_sequences(m.V, m.L)
    log_prior = ar_log_prob(m, seqs)
    log_r = r.log_reward(seqs)
    joint = log_prior + log_r
    log_z = float(logsumexp(joint))
    return ExactPosterior(seqs, log_prior, log_r, joint - log_z, log_z)


def rtb_discrete_residual(prior, post, log_z, x, r: SeqReward, tape=None):
    lz = tape.var(log_z) if tape is not None else np.asarray(log_z, dtype=float)
    return (lz + ar_log_prob(post, x, tape)) - (r.log_reward(x) + ar_log_prob(prior, x))


def rtb_discrete_loss(prior, post, log_z, x, r: SeqReward, tape=None):
    """Per-sequence squared residual (array), or its batch mean as a Var on a tape."""
    d = rtb_discrete_residual(prior, post, log_z, x, r, tape)
    if tape is None:
        return d**2
    return ad.scale(ad.vsum(ad.square(d)), 1.0 / len(np.atleast_2d(x)))


def tv(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@dataclass
class DiscreteConfig:
    iterations: int = 4000
    batch: int = 256
    lr: float = 0.05
    lr_log_z: float = 0.05
    lr_min: float = 1e-4  # cosine decay floor; at a constant lr Adam keeps jittering rare prefixes
    offpolicy_frac: float = 0.0
    use_vargrad: bool = False
    seed: int = 0
    check_every: int = 250


@dataclass
class DiscreteResult:
    post: TabularAR
    log_z: float
    history: list = field(default_factory=list)


def train_discrete(prior: TabularAR, r: SeqReward, cfg: DiscreteConfig | None = None, exact=None):
    """Fit a posterior policy with RTB (or its VarGrad form) by Adam.

    ``exact`` (an ExactPosterior) is needed for off-policy mixing and is
    used to log TV / max residual every ``check_every`` iterations.
    """
    cfg = cfg or DiscreteConfig()
    rng = np.random.default_rng(cfg.seed)
    if exact is None and (cfg.offpolicy_frac > 0 or cfg.check_every):
        exact = enumerate_posterior(prior, r)
    post = prior.copy()
    log_z = np.zeros(())
    opt = ad.adam_init([post.logits], cfg.lr)
    opt_z = ad.adam_init([log_z], cfg.lr_log_z)
    n_off = int(round(cfg.offpolicy_frac * cfg.batch))
    history = []
    for k in range(cfg.iterations + 1):
        if cfg.check_every and k % cfg.check_every == 0:
            history.append(_diagnostics(k, prior, post, log_z, r, exact, cfg.use_vargrad))
        if k == cfg.iterations:
            break
        decay = 0.5 * (1.0 + math.cos(math.pi * k / cfg.iterations))
        opt.lr = cfg.lr_min + (cfg.lr - cfg.lr_min) * decay
        opt_z.lr = cfg.lr_min + (cfg.lr_log_z - cfg.lr_min) * decay
        x = sample_ar(post, rng, cfg.batch - n_off)
        if n_off:
            pick = rng.choice(len(exact.seqs), size=n_off, p=exact.probs)
            x = np.concatenate([x, exact.seqs[pick]])
        tape = Tape()
        if cfg.use_vargrad:
            v = (ar_log_prob(prior, x) + r.log_reward(x)) - ar_log_prob(post, x, tape)
            loss = ad.scale(ad.vsum(ad.square(v - ad.scale(ad.vsum(v), 1.0 / len(x)))), 1.0 / len(x))
            (g,) = ad.backward(tape, loss, [post.logits])
            ad.adam_step(opt, [post.logits], [g])
            # running implicit estimate of log Z
            log_z[...] = 0.9 * log_z + 0.1 * float(v.value.mean()) if k else float(v.value.mean())
        else:
            loss = rtb_discrete_loss(prior, post, log_z, x, r, tape)
            g, gz = ad.backward(tape, loss, [post.logits, log_z])
            ad.adam_step(opt, [post.logits], [g])
            ad.adam_step(opt_z, [log_z], [gz])
    if cfg.use_vargrad:
        # final implicit estimate from a large on-policy batch
        x = sample_ar(post, rng, 8192)
        log_z[...] = float(np.mean(ar_log_prob(prior, x) + r.log_reward(x) - ar_log_prob(post, x)))
    return DiscreteResult(post, float(log_z), history)


def _diagnostics(k, prior, post, log_z, r, exact, vargrad):
    lp = exact_log_probs(post)
    row = {"iteration": k, "tv": tv(np.exp(lp), exact.probs)}
    if vargrad:
        v = exact.log_prior + exact.log_r - lp
        row["max_residual"] = float(v.max() - v.min()) / 2
    else:
        d = float(log_z) + lp - exact.log_r - exact.log_prior
        row["max_residual"] = float(np.abs(d).max())
    row["log_z"] = float(log_z)
    row["log_z_error"] = abs(float(log_z) - exact.log_z)
    return row


def export_tables(path, exact: ExactPosterior, learned_log_probs=None):
    """CSV rows: sequence, prior prob, reward, exact posterior, learned posterior."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "prior_prob", "reward", "exact_posterior", "learned_posterior"])
        for i, s in enumerate(exact.seqs):
            learned = "" if learned_log_probs is None else repr(float(np.exp(learned_log_probs[i])))
            w.writerow([
                "".join(map(str, s)),
                repr(float(np.exp(exact.log_prior[i]))),
                repr(float(np.exp(exact.log_r[i]))),
                repr(float(np.exp(exact.log_post[i]))),
                learned,
            ])
