"""Command-line interface: data generation, model training, evaluation, audits.

Report-writing commands drop a rendered PNG next to their delimited output:
`verify-tabular --report audit.csv` also writes audit.png, and `train --out-dir`
renders metrics.png beside metrics.csv.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import envs as envs_mod
from . import tabular
from .agent import ConfigurationError, IlqAgent, train
from .config import PROFILES, load_run_config
from .dataio import (
    load_checkpoint,
    read_dataset,
    import_jsonl,
    save_checkpoint,
    write_dataset,
)
from .diffusion import DiffusionBehavior, VarianceSchedule, train_behavior
from .dynamics import GaussianDynamics, train_dynamics
from .envs import GridworldSpec, PointMassSpec, expert_reference, random_reference
from .plots import render_audit_figure, render_training_figure

METRICS_COLUMNS = (
    "step", "critic_loss", "actor_loss", "q_in_mean", "q_ood_mean",
    "y_img_mean", "y_lmt_mean", "frac_lmt", "eval_return", "normalized_score",
)


def make_env(name: str, obs_noise: float = 0.0, horizon: int | None = None):
    if name == "pointmass":
        kw = {"obs_noise_std": obs_noise}
        if horizon is not None:
            kw["horizon"] = horizon
        return PointMassSpec(**kw)
    if name == "gridworld":
        kw = {}
        if horizon is not None:
            kw["horizon"] = horizon
        return GridworldSpec(**kw)
    raise ConfigurationError(f"unknown env {name!r}")


def load_any_dataset(path: str):
    if str(path).endswith(".jsonl"):
        return import_jsonl(path).validate()
    return read_dataset(path)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = make_env(args.env, obs_noise=args.obs_noise, horizon=args.horizon)
    dataset = envs_mod.generate_dataset(spec, args.level, args.n, args.seed)
    write_dataset(dataset, args.out)
    print(
        f"wrote {dataset.n} transitions to {args.out} "
        f"(env={args.env} level={args.level} seed={args.seed})"
    )
    return 0


def cmd_train_dynamics(args) -> int:
    dataset = load_any_dataset(args.data)
    cfg = load_run_config(None, args.profile).section("dynamics")
    model = GaussianDynamics(
        dataset.obs_dim,
        dataset.act_dim,
        hidden=tuple(cfg["hidden"]),
        penalty_lambda=args.penalty_lambda,
        dtype=np.float32,
        rng=np.random.default_rng(np.random.SeedSequence([args.seed, 0xD])),
    )
    train_dynamics(
        model, dataset,
        epochs=args.epochs if args.epochs is not None else cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr=args.lr if args.lr is not None else cfg["lr"],
        seed=args.seed,
    )
    save_checkpoint(args.out, model.state_tensors(), model.meta())
    print(f"trained dynamics model -> {args.out}")
    return 0


def cmd_train_behavior(args) -> int:
    dataset = load_any_dataset(args.data)
    cfg = load_run_config(None, args.profile).section("behavior")
    k_steps = args.k_steps if args.k_steps is not None else cfg["k_steps"]
    model = DiffusionBehavior(
        dataset.obs_dim,
        dataset.act_dim,
        schedule=VarianceSchedule.vp(K=k_steps),
        hidden=tuple(cfg["hidden"]),
        dtype=np.float32,
        rng=np.random.default_rng(np.random.SeedSequence([args.seed, 0xB])),
    )
    train_behavior(
        model, dataset,
        steps=args.steps if args.steps is not None else cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=args.lr if args.lr is not None else cfg["lr"],
        seed=args.seed,
    )
    save_checkpoint(args.out, model.state_tensors(), model.meta())
    print(f"trained behavior model -> {args.out}")
    return 0


def run_training(
    dataset,
    spec,
    config,
    out_dir: Path | None,
    dynamics=None,
    behavior=None,
    dynamics_opts: dict | None = None,
    behavior_opts: dict | None = None,
    refs: tuple[float, float] | None = None,
):
    """Pre-train any missing models, run the agent loop, persist artifacts.

    Returns (agent, TrainResult).  Used by both the CLI and the acceptance
    suite so the two exercise identical code.
    """
    needs_img = config.ablation != "no-imagination" and config.eta < 1.0
    needs_lmt = config.ablation != "no-limitation" and config.eta < 1.0
    if dynamics is None and needs_img:
        opts = dict(dynamics_opts or {})
        dynamics = GaussianDynamics(
            dataset.obs_dim, dataset.act_dim,
            hidden=tuple(opts.get("hidden", (64, 64))),
            penalty_lambda=opts.get("penalty_lambda", 0.0),
            dtype=np.float32,
            rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0xD])),
        )
        train_dynamics(
            dynamics, dataset,
            epochs=opts.get("epochs", 40),
            batch_size=opts.get("batch_size", 256),
            lr=opts.get("lr", 1e-3),
            seed=config.seed,
        )
    if behavior is None and needs_lmt:
        opts = dict(behavior_opts or {})
        behavior = DiffusionBehavior(
            dataset.obs_dim, dataset.act_dim,
            schedule=VarianceSchedule.vp(K=opts.get("k_steps", 5)),
            hidden=tuple(opts.get("hidden", (64,))),
            dtype=np.float32,
            rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0xB])),
        )
        train_behavior(
            behavior, dataset,
            steps=opts.get("steps", 30_000),
            batch_size=opts.get("batch_size", 256),
            lr=opts.get("lr", 3e-4),
            seed=config.seed,
        )

    the_agent = IlqAgent(dataset.obs_dim, dataset.act_dim, config, dynamics, behavior)

    writer = None
    csv_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=METRICS_COLUMNS, extrasaction="ignore")
        writer.writeheader()

    def on_row(row):
        if writer is not None:
            writer.writerow({k: row.get(k) for k in METRICS_COLUMNS})
            csv_file.flush()
            save_checkpoint(out_dir / "agent_latest.ilqc", the_agent.state_tensors(), the_agent.meta())

    random_ref, expert_ref = (refs if refs is not None else (None, None))
    try:
        result = train(
            the_agent, dataset, spec=spec,
            random_ref=random_ref, expert_ref=expert_ref, on_row=on_row,
        )
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "agent_final.ilqc", the_agent.state_tensors(), the_agent.meta())
        if dynamics is not None:
            save_checkpoint(out_dir / "dynamics.ilqc", dynamics.state_tensors(), dynamics.meta())
        if behavior is not None:
            save_checkpoint(out_dir / "behavior.ilqc", behavior.state_tensors(), behavior.meta())
        spec_bound = None
        if spec is not None:
            horizon = 1.0 / (1.0 - config.gamma)
            spec_bound = spec.r_max * horizon + abs(config.delta) * horizon
        render_training_figure(result.rows, out_dir / "metrics.png", q_bound=spec_bound)
    return the_agent, result


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config, args.profile)
    data_path = args.data or run_cfg.data
    if data_path is None:
        raise ConfigurationError("missing required field 'data' (--data or config)")
    dataset = load_any_dataset(data_path)

    config = run_cfg.agent_config(
        eta=args.eta, delta=args.delta, m_samples=args.m,
        train_steps=args.steps, seed=args.seed, ablation=args.ablate,
    )

    dynamics = behavior = None
    dyn_path = args.dynamics or run_cfg.dynamics_path
    if dyn_path:
        tensors, meta = load_checkpoint(dyn_path)
        dynamics = GaussianDynamics.from_state(tensors, meta)
    beh_path = args.behavior or run_cfg.behavior_path
    if beh_path:
        tensors, meta = load_checkpoint(beh_path)
        behavior = DiffusionBehavior.from_state(tensors, meta)

    env_name = args.env or run_cfg.env
    spec = make_env(env_name) if env_name else None
    refs = None
    if spec is not None:
        refs = (random_reference(spec, 50, seed=10_001), expert_reference(spec, 50, seed=10_002))

    out_dir = Path(args.out_dir or run_cfg.out_dir or "runs/ilq")
    _, result = run_training(
        dataset, spec, config, out_dir,
        dynamics=dynamics, behavior=behavior,
        dynamics_opts=run_cfg.section("dynamics"),
        behavior_opts=run_cfg.section("behavior"),
        refs=refs,
    )
    status = "diverged" if result.diverged else "completed"
    last_eval = result.eval_returns[-1] if result.eval_returns else float("nan")
    print(
        f"{status}: {len(result.rows)} metric rows, max|Q|={result.max_abs_q:.3g}, "
        f"final eval return {last_eval:.3f} -> {out_dir}/metrics.csv"
    )
    return 0


def cmd_eval(args) -> int:
    tensors, meta = load_checkpoint(args.checkpoint)
    the_agent = IlqAgent.from_state(tensors, meta)
    spec = make_env(args.env)
    mean_ret, std_ret = envs_mod.evaluate_policy(
        spec, the_agent.policy(), args.episodes, args.seed
    )
    rnd = random_reference(spec, 50, seed=10_001)
    exp = expert_reference(spec, 50, seed=10_002)
    score = envs_mod.normalized_score(mean_ret, rnd, exp)
    print(f"eval_return={mean_ret:.4f} std={std_ret:.4f} normalized_score={score:.2f}")
    return 0


def cmd_verify_tabular(args) -> int:
    rng = np.random.default_rng(args.seed)
    report_path = Path(args.report)
    records = []
    check_rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xC]))
    for index in range(args.n_mdps):
        n_states = int(rng.integers(2, args.max_states + 1))
        n_actions = int(rng.integers(2, args.max_actions + 1))
        gamma = args.gamma if args.gamma is not None else float(rng.choice([0.5, 0.9, 0.99]))
        mdp = tabular.random_mdp(rng, n_states, n_actions, gamma)
        support = tabular.random_support(rng, n_states, n_actions)
        model = tabular.EmpiricalModel.exact(mdp)
        report = tabular.audit_theorems(mdp, model, support, args.delta)

        shape = (n_states, n_actions)
        nonexp_ok = True
        two_step_ok = True
        step = lambda q: tabular.ilb_backup(q, mdp, model, support, args.delta)
        for _ in range(3):
            q1 = check_rng.uniform(-10, 10, size=shape)
            q2 = check_rng.uniform(-10, 10, size=shape)
            d0 = np.abs(q1 - q2).max()
            t1, t2 = step(q1), step(q2)
            nonexp_ok &= bool(np.abs(t1 - t2).max() <= d0)
            two_step_ok &= bool(np.abs(step(t1) - step(t2)).max() <= gamma * d0 + 1e-9)

        records.append({
            "mdp_index": index,
            "n_states": n_states,
            "n_actions": n_actions,
            "gamma": gamma,
            "delta": args.delta,
            "lhs_thm2": report.lhs_thm2, "rhs_thm2": report.rhs_thm2,
            "lhs_thm3": report.lhs_thm3, "rhs_thm3": report.rhs_thm3,
            "lhs_thm4": report.lhs_thm4, "rhs_thm4": report.rhs_thm4,
            "epsilon_pi": report.epsilon_pi, "epsilon_p": report.epsilon_p,
            "lipschitz_l": report.lipschitz_l,
            "satisfied_thm2": report.satisfied[0],
            "satisfied_thm3": report.satisfied[1],
            "satisfied_thm4": report.satisfied[2],
            "nonexpansion_ok": nonexp_ok,
            "two_step_contraction_ok": two_step_ok,
        })

    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)
    figure_path = report_path.with_suffix(".png")
    render_audit_figure(records, figure_path)

    all_ok = all(
        r["satisfied_thm2"] and r["satisfied_thm3"] and r["satisfied_thm4"]
        and r["nonexpansion_ok"] and r["two_step_contraction_ok"]
        for r in records
    )
    print(
        f"audited {len(records)} MDPs -> {report_path} (+ {figure_path.name}); "
        f"all bounds satisfied: {all_ok}"
    )
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ilq",
        description="Imagination-limited Q-learning: tabular audits and desk-scale training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll a behavior level and write an ILQD dataset")
    p.add_argument("--env", choices=("gridworld", "pointmass"), required=True)
    p.add_argument("--level", default="medium",
                   choices=tuple(envs_mod.LEVELS_ORDER))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--obs-noise", type=float, default=0.0)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-dynamics", help="fit the Gaussian dynamics model")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--penalty-lambda", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=tuple(PROFILES), default="desk")
    p.set_defaults(func=cmd_train_dynamics)

    p = sub.add_parser("train-behavior", help="fit the diffusion behavior model")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--k-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=tuple(PROFILES), default="desk")
    p.set_defaults(func=cmd_train_behavior)

    p = sub.add_parser("train", help="run the offline agent training loop")
    p.add_argument("--data", default=None)
    p.add_argument("--dynamics", default=None)
    p.add_argument("--behavior", default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--profile", choices=tuple(PROFILES), default="desk")
    p.add_argument("--ablate", choices=agent_mod.ABLATIONS, default="none")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--env", default=None, choices=("gridworld", "pointmass"))
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained agent checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", required=True, choices=("gridworld", "pointmass"))
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-tabular", help="audit operator bounds on random MDPs")
    p.add_argument("--n-mdps", type=int, default=100)
    p.add_argument("--max-states", type=int, default=20)
    p.add_argument("--max-actions", type=int, default=8)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_verify_tabular)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parseable line, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
