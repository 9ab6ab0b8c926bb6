"""Command-line entry point: train, extract, eval, compare.

Each invocation creates a run directory out/<timestamp>-<command>/ holding
logs, checkpoints, reports, and a manifest written atomically last.  Exit
codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import Settings
from .errors import ConfigError
from .harness import (
    ElBaseline,
    EvalReport,
    NetworkPolicy,
    compare,
    export_comparison,
    export_report,
    run_eval,
)
from .neural import CHECKPOINT_SCHEMA, load_checkpoint
from .ppo import NonFiniteLoss, train
from .simnet import OBS_DIM, EpisodeConfig, LoadBalanceEnv
from .symbolic import (
    ExprPolicy,
    REFERENCE_IDS,
    distill_ppo_ds,
    eval_raw,
    extract_kan_symbolic,
    finetune_coeffs,
    parse_infix,
    parse_sexpr,
    reference_policy,
    to_infix,
    to_sexpr,
    uniform_grid_states,
)

MANIFEST_SCHEMA = "kanlb-manifest-v1"


class UsageError(Exception):
    """Problems the caller can fix: bad specs, bad config, misuse."""


# --------------------------------------------------------------------------
# Run directories and manifests
# --------------------------------------------------------------------------

def _out_root(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("KANLB_OUT", "out"))


def make_run_dir(root: Path, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{command}"
    candidate = base
    suffix = 2
    while candidate.exists():
        candidate = Path(f"{base}-{suffix}")
        suffix += 1
    candidate.mkdir(parents=True)
    return candidate


def write_manifest(run_dir: Path, command: str, argv: list[str],
                   resolved: dict, seeds: dict, outputs: list[Path],
                   checkpoints: list[str], started: float) -> Path:
    rel_outputs = sorted(str(p.relative_to(run_dir)) for p in outputs)
    for rel in rel_outputs:
        if not (run_dir / rel).exists():
            raise RuntimeError(f"declared output missing: {rel}")
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "argv": argv,
        "resolved_config": resolved,
        "seeds": seeds,
        "code_version": __version__,
        "checkpoints": checkpoints,
        "outputs": rel_outputs,
        "duration_s": time.time() - started,
    }
    path = run_dir / "manifest.json"
    tmp = run_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def _default_seed(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("KANLB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"KANLB_SEED is not an integer: {env!r}") from exc
    return 0


# --------------------------------------------------------------------------
# Policy spec resolution
# --------------------------------------------------------------------------

def resolve_policy_spec(spec: str):
    """builtin:NAME | checkpoint.json | report.json | expression file."""
    if spec.startswith("builtin:"):
        name = spec[len("builtin:"):]
        if name == "el-baseline":
            return ElBaseline()
        if name in REFERENCE_IDS:
            return ExprPolicy(reference_policy(name), policy_id=name)
        raise UsageError(
            f"unknown builtin policy {name!r}; expected el-baseline or one of "
            + ", ".join(REFERENCE_IDS)
        )
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"policy spec does not resolve: {spec!r}")
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        schema = payload.get("schema", "")
        if schema == CHECKPOINT_SCHEMA:
            _, policy, _, _ = load_checkpoint(path)
            return NetworkPolicy(policy, policy_id=path.stem)
        if schema.startswith("kanlb-report"):
            return EvalReport.from_dict(payload)
        raise UsageError(f"{spec}: unrecognized JSON schema {schema!r}")
    text = path.read_text().strip()
    try:
        expr = parse_sexpr(text) if text.startswith("(") else parse_infix(text)
    except ValueError as exc:
        raise UsageError(f"{spec}: cannot parse expression: {exc}") from exc
    return ExprPolicy(expr, policy_id=path.stem)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    settings = Settings.load(args.config)
    seed = _default_seed(args.seed)
    params = settings.sim_params()
    config = settings.ppo_config(seed=seed, reward_kind=args.reward)
    run_dir = make_run_dir(_out_root(args.out), "train")

    try:
        result = train(
            params, config, args.actor,
            grid=settings.grid_spec(),
            mlp_hidden=settings.mlp_hidden(),
            init_log_std=settings.init_log_std(),
            coeff_std=settings.spline_init_std(),
            w_base_init=settings.w_base_init(),
            w_spline_init=settings.w_spline_init(),
            out_dir=run_dir,
        )
    except NonFiniteLoss as exc:
        last_good = run_dir / "checkpoint_last_good.json"
        print(f"error: training loss became non-finite ({exc.snapshot}); "
              f"last good checkpoint at {last_good}", file=sys.stderr)
        return 1

    outputs = [result.checkpoint_path, result.log_path]
    write_manifest(
        run_dir, "train", argv,
        resolved={"sim": vars(params), "ppo": vars(config),
                  "actor": args.actor, "raw": settings.raw},
        seeds={"seed": seed},
        outputs=outputs,
        checkpoints=[str(result.checkpoint_path)],
        started=started,
    )
    print(run_dir)
    return 0


def _collect_states(policy, params, seed: int, episodes: int) -> np.ndarray:
    env = LoadBalanceEnv(params)
    states = np.zeros((episodes * params.steps_per_episode, OBS_DIM))
    k = 0
    for i in range(episodes):
        config = EpisodeConfig.random(params, np.random.default_rng(seed + i))
        obs = env.reset(config)
        for _ in range(params.steps_per_episode):
            states[k] = obs
            k += 1
            out = env.step(policy.act(obs))
            obs = out.obs
    return states


def cmd_extract(args: argparse.Namespace, argv: list[str]) -> int:
    started = time.time()
    settings = Settings.load(args.config)
    seed = _default_seed(args.seed)
    params = settings.sim_params()

    try:
        actor_kind, policy, _, meta = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    if args.method == "kan-symbolic" and actor_kind != "kan":
        raise UsageError(
            f"method kan-symbolic needs a KAN actor checkpoint, got {actor_kind!r}"
        )

    parent = NetworkPolicy(policy, policy_id=Path(args.checkpoint).stem)
    episodes = settings.extract_episodes()
    states = _collect_states(parent, params, seed, episodes)
    if settings.state_source() == "grid":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        states = uniform_grid_states(states.min(axis=0), states.max(axis=0),
                                     states.shape[0], rng)

    if args.method == "kan-symbolic":
        expr, report = extract_kan_symbolic(
            policy.mean_net, states,
            importance_threshold=settings.importance_threshold(),
            search=settings.affine_search(),
        )
    else:
        distill = settings.distill_config(seed)
        need = max(episodes, -(-distill.dataset_size // params.steps_per_episode))
        if need > episodes:
            states = _collect_states(parent, params, seed, need)
        x = states[: distill.dataset_size]
        y = np.array([policy.act(row) for row in x])
        expr, report = distill_ppo_ds(x, y, distill)

    # Held-out fidelity against the parent's clamped mean.
    held_out = _collect_states(parent, params, seed + 50_000, episodes)
    parent_mean = np.array([policy.act(row) for row in held_out])
    preds = np.clip(eval_raw(expr, held_out), -1.0, 1.0)
    ss_tot = float(((parent_mean - parent_mean.mean()) ** 2).sum())
    ss_res = float(((parent_mean - preds) ** 2).sum())
    report["held_out_r_squared"] = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    report["held_out_mse"] = ss_res / held_out.shape[0]
    report["parent_checkpoint"] = str(args.checkpoint)
    report["seed"] = seed

    run_dir = make_run_dir(_out_root(args.out), "extract")
    outputs = []
    sexpr_path = run_dir / "expression.sexpr"
    sexpr_path.write_text(to_sexpr(expr) + "\n")
    infix_path = run_dir / "expression.txt"
    infix_path.write_text(to_infix(expr) + "\n")
    outputs += [sexpr_path, infix_path]

    if args.finetune:
        reward_kind = str(meta.get("config", {}).get("reward_kind", "loss"))
        ppo_config = settings.ppo_config(seed=seed, reward_kind=reward_kind)
        ppo_config.total_steps = settings.finetune_steps()
        env = LoadBalanceEnv(params)
        tuned = finetune_coeffs(
            expr, env, ppo_config,
            lambda rng: EpisodeConfig.random(params, rng),
            init_log_std=settings.init_log_std(),
            eval_episodes=settings.finetune_eval_episodes(),
        )
        report["finetune"] = {
            "steps": ppo_config.total_steps,
            "reward_kind": reward_kind,
            "reward_before": tuned.reward_before,
            "reward_after": tuned.reward_after,
        }
        ft_sexpr = run_dir / "expression_finetuned.sexpr"
        ft_sexpr.write_text(to_sexpr(tuned.expr) + "\n")
        ft_infix = run_dir / "expression_finetuned.txt"
        ft_infix.write_text(to_infix(tuned.expr) + "\n")
        outputs += [ft_sexpr, ft_infix]

    report_path = run_dir / "extraction_report.json"
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True))
    outputs.append(report_path)

    write_manifest(
        run_dir, "extract", argv,
        resolved={"sim": vars(params), "method": args.method,
                  "raw": settings.raw},
        seeds={"seed": seed},
        outputs=outputs,
        checkpoints=[str(args.checkpoint)],
        started=started,
    )
    print(run_dir)
    return 0


def _run_eval_command(args: argparse.Namespace, argv: list[str],
                      command: str) -> int:
    started = time.time()
    settings = Settings.load(args.config)
    params = settings.sim_params()
    if command == "compare" and len(args.specs) < 2:
        raise UsageError("compare needs at least two policy specs")

    reports = []
    for spec in args.specs:
        resolved = resolve_policy_spec(spec)
        if isinstance(resolved, EvalReport):
            reports.append(resolved)
        else:
            reports.append(run_eval(resolved, params, args.episodes,
                                    args.seed_base,
                                    action_mode=args.action_mode))

    run_dir = make_run_dir(_out_root(args.out), command)
    outputs = []
    for report in reports:
        outputs += export_report(report, run_dir)
    if len(reports) >= 2:
        try:
            comparison = compare(reports)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        outputs += export_comparison(comparison, run_dir)

    write_manifest(
        run_dir, command, argv,
        resolved={"sim": vars(params), "episodes": args.episodes,
                  "seed_base": args.seed_base, "action_mode": args.action_mode,
                  "specs": list(args.specs), "raw": settings.raw},
        seeds={"seed_base": args.seed_base},
        outputs=outputs,
        checkpoints=[s for s in args.specs if s.endswith(".json")],
        started=started,
    )
    print(run_dir)
    return 0


def cmd_eval(args: argparse.Namespace, argv: list[str]) -> int:
    return _run_eval_command(args, argv, "eval")


def cmd_compare(args: argparse.Namespace, argv: list[str]) -> int:
    return _run_eval_command(args, argv, "compare")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kanlb",
        description="Interpretable two-link load balancing workbench",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy with PPO")
    p_train.add_argument("config", nargs="?", default=None,
                         help="key-value config file")
    p_train.add_argument("--actor", choices=["kan", "mlp"], default="kan")
    p_train.add_argument("--reward", choices=["utility", "loss"], default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None, help="run directory root")
    p_train.set_defaults(func=cmd_train)

    p_extract = sub.add_parser("extract", help="extract a symbolic controller")
    p_extract.add_argument("checkpoint")
    p_extract.add_argument("--method", choices=["kan-symbolic", "ppo-ds"],
                           required=True)
    p_extract.add_argument("--finetune", action="store_true")
    p_extract.add_argument("--config", default=None)
    p_extract.add_argument("--seed", type=int, default=None)
    p_extract.add_argument("--out", default=None)
    p_extract.set_defaults(func=cmd_extract)

    for name, helptext in (("eval", "evaluate policies over seeded episodes"),
                           ("compare", "evaluate and compare two or more policies")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("specs", nargs="+", metavar="POLICY",
                       help="checkpoint/expression/report file or builtin:NAME")
        p.add_argument("--episodes", type=int, default=100)
        p.add_argument("--seed-base", type=int, default=0)
        p.add_argument("--action-mode", choices=["mean", "sample"],
                       default="mean")
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.set_defaults(func=cmd_eval if name == "eval" else cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
