"""Command-line harness: seeded runs writing config, metrics, checkpoints and
samples into a run directory, plus evaluation and figures."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import train
from .checkpoint import (
    file_hash,
    load_net,
    read_samples,
    save_net,
    write_rows,
    write_samples,
)
from .config import PROFILES, RunConfig, load_config, make_config
from .discrete import (
    DiscreteConfig,
    default_seq_reward,
    enumerate_posterior,
    exact_log_probs,
    export_tables,
    init_tabular,
    train_discrete,
    tv,
)
from .evaluate import (
    estimate_log_z,
    excluded_mass,
    mode_count,
    mode_histogram,
    tv_distance,
)
from .plotting import plot_panels, write_panel_table
from .targets import posterior_sample, reference_bin_weights

log = logging.getLogger("rtb")

METRIC_COLUMNS = [
    "iteration", "loss", "log_z", "tv", "mode_count", "min_mode_freq",
    "excluded_mass", "logZ_IS", "path_kl", "kl_weight",
]
LOG_61 = float(np.log(61.0))


class CliError(Exception):
    pass


# --- run directory ----------------------------------------------------------


def source_hash(cfg: RunConfig):
    """sha256 over the resolved config (minus the output path) and the package sources."""
    d = cfg.to_dict()
    d.pop("out")
    h = hashlib.sha256(json.dumps(d, sort_keys=True).encode())
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def prepare_run_dir(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "seed").write_text(f"{cfg.seed}\n")
    (out / "hash").write_text(source_hash(cfg) + "\n")
    return out


def write_metrics(out, result):
    write_rows(out / "metrics.csv", result.metrics, METRIC_COLUMNS)
    write_rows(out / "timing.csv", result.timing, ["iteration", "wallclock"])


def _print_checks(checks):
    ok = True
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= bool(passed)
    return ok


def _progress(row):
    log.info("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


# --- commands -----------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig):
    out = prepare_run_dir(cfg)
    result = train.pretrain_prior(cfg, _progress)
    save_net(out / "prior.npz", result.net, result.log_z)
    write_metrics(out, result)
    rng = np.random.default_rng([cfg.seed, 6])
    from .diffusion import sample_forward

    x = sample_forward(result.net, train.schedule_of(cfg), rng, cfg.final_samples).terminal
    write_samples(out / "samples.csv", x)
    h = mode_histogram(x, cfg.gmm)
    uniform = np.full(len(cfg.gmm.means), 1.0 / len(cfg.gmm.means))
    summary = {
        "tv": tv_distance(h, uniform),
        "min_mode_freq": float(h.freqs.min()),
        "log_z": result.log_z,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [
        ("prior tv < 0.10", summary["tv"] < 0.10, f"{summary['tv']:.4f}"),
        ("all modes >= 2%", summary["min_mode_freq"] >= 0.02, f"{summary['min_mode_freq']:.4f}"),
        ("|log_z| < 0.2", abs(summary["log_z"]) < 0.2, f"{summary['log_z']:.4f}"),
    ]


def _load_prior(path):
    if path is None:
        raise CliError("--prior <checkpoint> is required")
    if not Path(path).exists():
        raise CliError(f"prior checkpoint {path} not found")
    net, _ = load_net(path)
    return net


def posterior_summary(cfg, post, prior, x, reward_grad=None):
    r, g = cfg.reward_spec, cfg.gmm
    ref = reference_bin_weights(r, g)
    h = mode_histogram(x, g)
    log_r_fn, _ = train._reward_fns(cfg)
    est, err = estimate_log_z(
        post, prior, train.schedule_of(cfg), log_r_fn, np.random.default_rng([cfg.seed, 7]),
        n=cfg.final_samples, reward_grad=reward_grad,
    )
    return {
        "tv": tv_distance(h, ref),
        "excluded_mass": excluded_mass(h, ref),
        "mode_count": mode_count(h),
        "log_z": float(post.log_z),
        "estimate_log_z": est,
        "estimate_log_z_stderr": err,
    }


def posterior_checks(s):
    return [
        ("posterior tv < 0.10", s["tv"] < 0.10, f"{s['tv']:.4f}"),
        ("excluded mass < 2%", s["excluded_mass"] < 0.02, f"{s['excluded_mass']:.4f}"),
        ("mode_count == 9", s["mode_count"] == 9, str(s["mode_count"])),
        ("|log_z - log 61| < 0.3", abs(s["log_z"] - LOG_61) < 0.3, f"{s['log_z']:.4f}"),
        ("|estimate - log 61| < 0.3", abs(s["estimate_log_z"] - LOG_61) < 0.3, f"{s['estimate_log_z']:.4f}"),
    ]


def cmd_finetune(cfg: RunConfig, prior_path):
    prior = _load_prior(prior_path)
    out = prepare_run_dir(cfg)
    result = train.finetune_posterior(cfg, prior, _progress)
    post = result.posterior
    save_net(out / "posterior.npz", post.post_net, post.log_z)
    write_metrics(out, result)
    from .diffusion import sample_forward

    _, grad_fn = train._reward_fns(cfg)
    reward_grad = grad_fn if cfg.langevin else None
    x = sample_forward(
        post.post_net, train.schedule_of(cfg), np.random.default_rng([cfg.seed, 6]), cfg.final_samples,
        0.0, reward_grad,
    ).terminal
    write_samples(out / "samples.csv", x)
    s = posterior_summary(cfg, post, prior, x, reward_grad)
    (out / "summary.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    checks = posterior_checks(s)
    if cfg.method == "vargrad":
        checks = checks[:3]
    return checks


def cmd_baseline(cfg: RunConfig, prior_path):
    prior = _load_prior(prior_path)
    out = prepare_run_dir(cfg)
    r, g = cfg.reward_spec, cfg.gmm
    ref = reference_bin_weights(r, g)
    if cfg.method == "cg":
        x = train.sample_cg(cfg, prior, cfg.final_samples)
        h = mode_histogram(x, g)
        rows = [{"iteration": 0, "tv": tv_distance(h, ref), "mode_count": mode_count(h),
                 "excluded_mass": excluded_mass(h, ref)}]
        write_rows(out / "metrics.csv", rows, METRIC_COLUMNS)
        write_samples(out / "samples.csv", x)
        return []
    if cfg.method != "rl":
        raise CliError("baseline needs --method rl or cg")
    sweep = cfg.kl_sweep or (cfg.kl_weight,)
    rows, timing = [], []
    for alpha in sweep:
        result = train.train_rl(cfg, prior, alpha, _progress)
        final = dict(result.metrics[-1])
        final["kl_weight"] = alpha
        rows.append(final)
        timing.append({"iteration": final["iteration"], "wallclock": result.timing[-1]["wallclock"]})
        save_net(out / f"policy_alpha{alpha:g}.npz", result.net)
    from .diffusion import sample_forward

    x = sample_forward(result.net, train.schedule_of(cfg), np.random.default_rng([cfg.seed, 6]), cfg.final_samples)
    write_samples(out / "samples.csv", x.terminal)
    write_rows(out / "metrics.csv", rows, METRIC_COLUMNS)
    write_rows(out / "timing.csv", timing, ["iteration", "wallclock"])
    return []


def cmd_discrete(cfg: RunConfig):
    out = prepare_run_dir(cfg)
    rng = np.random.default_rng(cfg.seed)
    prior = init_tabular(cfg.vocab, cfg.length, rng)
    r = default_seq_reward(cfg.vocab, cfg.length, seed=cfg.seed)
    exact = enumerate_posterior(prior, r)
    dcfg = DiscreteConfig(iterations=cfg.discrete_iters, lr=cfg.discrete_lr, seed=cfg.seed,
                          use_vargrad=cfg.method == "vargrad")
    res = train_discrete(prior, r, dcfg, exact)
    lp = exact_log_probs(res.post)
    dist = tv(np.exp(lp), exact.probs)
    err = abs(res.log_z - exact.log_z)
    print(f"tv_vs_oracle {dist:.3e}")
    print(f"log_z_error {err:.3e}")
    write_rows(out / "metrics.csv", res.history, ["iteration", "tv", "max_residual", "log_z", "log_z_error"])
    export_tables(out / "tables.csv", exact, lp)
    return [
        ("discrete tv < 1e-2", dist < 1e-2, f"{dist:.3e}"),
        ("|log_z - exact| < 1e-2", err < 1e-2, f"{err:.3e}"),
    ]


def _run_reference(run_dir):
    cfg = make_config(overrides=json.loads((run_dir / "config.json").read_text()))
    if cfg.command == "pretrain":
        n = len(cfg.gmm.means)
        return cfg, np.full(n, 1.0 / n)
    return cfg, reference_bin_weights(cfg.reward_spec, cfg.gmm)


def cmd_eval(run_dir, out=None):
    run_dir = Path(run_dir)
    cfg, ref = _run_reference(run_dir)
    x = read_samples(run_dir / "samples.csv")
    h = mode_histogram(x, cfg.gmm)
    summary = {
        "n_samples": len(x),
        "tv": tv_distance(h, ref),
        "mode_count": mode_count(h),
        "excluded_mass": excluded_mass(h, ref),
        "min_mode_freq": float(h.freqs.min()),
    }
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    (Path(out) if out else run_dir / "eval.json").write_text(text)
    print(text, end="")
    return []


def _panel_name(run_dir, cfg):
    if cfg.command == "pretrain":
        return "prior"
    name = cfg.method
    if cfg.command == "finetune" and cfg.offpolicy != "none":
        name += f" ({cfg.offpolicy})"
    return f"{name} [{run_dir.name}]"


def cmd_plot(run_dirs, out, seed=0, with_exact=True):
    """Figure with one panel per run directory, plus exact posterior draws."""
    panels, cfg, ref = {}, None, None
    for d in map(Path, run_dirs):
        cfg, ref_d = _run_reference(d)
        panels[_panel_name(d, cfg)] = read_samples(d / "samples.csv")
        if cfg.command != "pretrain":
            ref = ref_d
    if cfg is None:
        cfg = make_config()
    if with_exact:
        panels["exact posterior"] = posterior_sample(cfg.reward_spec, np.random.default_rng(seed), 5_000, cfg.gmm)
        ref = reference_bin_weights(cfg.reward_spec, cfg.gmm)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    svg = plot_panels(panels, cfg.gmm, out / "panels.svg", ref)
    write_panel_table(out / "panels.csv", panels, cfg.gmm, ref)
    print(f"{svg} {file_hash(svg)[:16]}")
    return []


# --- argument parsing -----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="rtb", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of RunConfig overrides")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory")
        sp.add_argument("--profile", choices=sorted(PROFILES), default="fast")
        sp.add_argument("--method", choices=["rtb", "vargrad", "rl", "cg"])
        sp.add_argument("--offpolicy", choices=["none", "mixed", "only"])
        sp.add_argument("--iters", type=int, help="override the iteration count")
        sp.add_argument("--check", action="store_true", help="exit nonzero unless acceptance checks hold")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name in ("pretrain", "discrete"):
        common(sub.add_parser(name))
    for name in ("finetune", "baseline"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--prior", help="prior checkpoint (.npz)")
    sp = sub.add_parser("eval")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="summary JSON path (default: RUN_DIR/eval.json)")
    sp = sub.add_parser("plot")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--out", required=True, help="figure directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-exact", action="store_true", help="omit the exact posterior panel")
    return p


def config_from_args(args):
    overrides = load_config(args.config) if args.config else {}
    kw = {"seed": args.seed, "out": args.out, "method": args.method, "offpolicy": args.offpolicy}
    if args.command == "pretrain":
        kw["pretrain_iters"] = args.iters
    elif args.command == "discrete":
        kw["discrete_iters"] = args.iters
    else:
        kw["finetune_iters"] = args.iters
    cfg = make_config(args.profile, overrides, command=args.command, **kw)
    if args.command == "finetune" and cfg.method not in ("rtb", "vargrad"):
        raise CliError("finetune needs --method rtb or vargrad")
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        if args.command == "eval":
            checks = cmd_eval(args.run_dir, args.out)
        elif args.command == "plot":
            checks = cmd_plot(args.run_dirs, args.out, args.seed, not args.no_exact)
        else:
            cfg = config_from_args(args)
            if args.command == "pretrain":
                checks = cmd_pretrain(cfg)
            elif args.command == "finetune":
                checks = cmd_finetune(cfg, args.prior)
            elif args.command == "baseline":
                checks = cmd_baseline(cfg, args.prior)
            else:
                checks = cmd_discrete(cfg)
    except (CliError, ValueError, OSError, train.DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    ok = _print_checks(checks)
    if getattr(args, "check", False) and not ok:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
