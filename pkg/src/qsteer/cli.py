"""``qsteer`` command-line front end.

Subcommands::

    qsteer run       --config FILE   train one strategy/seed, write CSV + JSON
    qsteer compare   --config FILE   every strategy x seed, plus aggregate CSV
    qsteer evaluate  --config FILE ARTIFACT   roll out a trained run
    qsteer landscape --config FILE PULSES     transition probability of a sequence

Any config key can be overridden as ``--section.key=value``.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Sequence

from qsteer import serialize as ser
from qsteer.config import ExperimentConfig, build_env, parse_config
from qsteer.quantum import state_to_bloch, transition_landscape
from qsteer.trainer import (
    ConfigError,
    RunResult,
    aggregate,
    check_robbins_monro,
    evaluate_policy,
    run_many,
    train,
)

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# argument handling


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="experiment config file")
    common.add_argument("--out", default=None, metavar="DIR", help="output directory (default: $QSTEER_OUT or ./out)")
    common.add_argument("--seed", type=int, default=None, help="use this seed instead of the configured list")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel worker processes")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    p = argparse.ArgumentParser(
        prog="qsteer",
        description="Tabular Q-learning variants on quantum control tasks.",
        epilog="Config keys can be overridden with --section.key=value.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train the first configured strategy on one seed")
    cmp_ = sub.add_parser("compare", parents=[common], help="train every strategy on every seed")
    cmp_.add_argument("--allow-single", action="store_true", help="permit a single-strategy comparison")
    ev = sub.add_parser("evaluate", parents=[common], help="roll out a trained artifact without learning")
    ev.add_argument("artifact", help="artifact JSON written by `run`")
    ev.add_argument("--mode", choices=("greedy", "policy"), default="greedy")
    ls = sub.add_parser("landscape", parents=[common], help="evaluate J for a pulse sequence")
    ls.add_argument("pulses", help="file with one action index per line")
    return p


def split_overrides(extra: Sequence[str]) -> dict[str, str]:
    """Turn leftover ``--section.key=value`` / ``--section.key value`` tokens into a mapping."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise CLIError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise CLIError(f"override {tok} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out is not None:
        path = Path(args.out)
    elif os.environ.get("QSTEER_OUT"):
        path = Path(os.environ["QSTEER_OUT"])
    elif cfg.output_dir:
        path = Path(cfg.output_dir)
    else:
        path = Path("out")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {path}: {exc}", EXIT_RUN_FAILED) from None
    if not os.access(path, os.W_OK):
        raise CLIError(f"output directory {path} is not writable", EXIT_RUN_FAILED)
    return path


def _write(path: Path, text: str) -> Path:
    try:
        return ser.write_text(path, text)
    except OSError as exc:
        raise CLIError(f"cannot write {path}: {exc}", EXIT_RUN_FAILED) from None


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _plots_on(args, cfg: ExperimentConfig) -> bool:
    return cfg.plots and not args.no_plots


def _rm_message(cfg: ExperimentConfig) -> str:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return check_robbins_monro(cfg.training.schedule).message


def _override_echo(overrides: dict[str, str], seed: int | None) -> dict[str, str]:
    out = dict(overrides)
    if seed is not None:
        out["--seed"] = str(seed)
    return out


# --------------------------------------------------------------------------
# subcommands


def _run_summary(cfg: ExperimentConfig, name: str, seed: int, res: RunResult, overrides: dict) -> dict:
    env = cfg.make_env()
    traj = evaluate_policy(env, res.q, "greedy", max_steps=res.config.step_cap)
    last = traj[-1] if traj else None
    return {
        "command": "run",
        "status": "ok",
        "strategy": name,
        "seed": seed,
        "episodes": len(res.records),
        "convergence_episode": res.convergence_episode,
        "greedy_rollout_steps": len(traj),
        "final_fidelity": None if last is None else last.fidelity,
        "wall_time": res.wall_time,
        "learning_rate_check": _rm_message(cfg),
        "config": cfg.echo,
        "overrides": overrides,
    }


def cmd_run(args, cfg: ExperimentConfig, overrides: dict[str, str]) -> int:
    out = _out_dir(args, cfg)
    name = cfg.strategy_names[0]
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    tcfg = cfg.train_config(name, seed)
    res = train(cfg.make_env(), tcfg, cfg.environment_change)
    stem = f"{name}_{seed}"
    _write(out / f"{stem}.csv", ser.episodes_csv(res.records))
    summary = _run_summary(cfg, name, seed, res, _override_echo(overrides, args.seed))
    _write(out / f"{stem}_summary.json", ser.json_text(summary))
    art = ser.artifact_dict(res.q, res.policy, name, seed, cfg.env_kind, cfg.echo)
    _write(out / f"{stem}_artifact.json", ser.json_text(art))
    if _plots_on(args, cfg):
        from qsteer import plots

        plots.learning_curve(res.records, cfg.make_env().progress_metric, out / f"{stem}_learning.png", stem)
    _say(
        args,
        f"{name} seed {seed}: {len(res.records)} episodes, convergence episode "
        f"{summary['convergence_episode']}, greedy rollout {summary['greedy_rollout_steps']} steps, "
        f"final fidelity {summary['final_fidelity']}; outputs in {out}",
    )
    return EXIT_OK


def cmd_compare(args, cfg: ExperimentConfig, overrides: dict[str, str]) -> int:
    if len(cfg.strategies) < 2 and not args.allow_single:
        raise CLIError("compare needs at least two strategies (or --allow-single)")
    if args.jobs < 1:
        raise CLIError("--jobs must be >= 1")
    out = _out_dir(args, cfg)
    seeds = (args.seed,) if args.seed is not None else tuple(sorted(cfg.seeds))
    pairs = [(name, s) for name in sorted(cfg.strategies) for s in seeds]
    configs = [cfg.train_config(name, s) for name, s in pairs]
    factory = partial(build_env, cfg.env_kind, cfg.env_config)
    outs = run_many(factory, configs, cfg.environment_change, args.jobs, capture_errors=True)

    statuses = []
    good: dict[str, list[RunResult]] = {}
    for (name, s), res in zip(pairs, outs):
        if isinstance(res, Exception):
            statuses.append({"strategy": name, "seed": s, "status": "failed", "error": str(res)})
            continue
        _write(out / f"{name}_{s}.csv", ser.episodes_csv(res.records))
        good.setdefault(name, []).append(res)
        statuses.append(
            {
                "strategy": name,
                "seed": s,
                "status": "ok",
                "convergence_episode": res.convergence_episode,
                "cumulative_steps": res.cumulative_steps,
                "wall_time": res.wall_time,
            }
        )
    rows = [aggregate(name, runs) for name, runs in sorted(good.items())]
    _write(out / "aggregate.csv", ser.aggregate_csv(rows))
    failed = sum(st["status"] != "ok" for st in statuses)
    summary = {
        "command": "compare",
        "status": "ok" if not failed else "partial_failure",
        "runs": statuses,
        "aggregate": [r.__dict__ for r in rows],
        "learning_rate_check": _rm_message(cfg),
        "config": cfg.echo,
        "overrides": _override_echo(overrides, args.seed),
    }
    _write(out / "compare_summary.json", ser.json_text(summary))
    if _plots_on(args, cfg) and good:
        from qsteer import plots

        metric = cfg.make_env().progress_metric
        plots.comparison({n: [r.records for r in rs] for n, rs in good.items()}, metric, out / "comparison.png")
    if not args.quiet:
        print(ser.aggregate_csv(rows), end="")
        if failed:
            print(f"{failed} run(s) failed; see {out / 'compare_summary.json'}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_RUN_FAILED


def cmd_evaluate(args, cfg: ExperimentConfig, overrides: dict[str, str]) -> int:
    try:
        q, p, doc = ser.load_artifact(args.artifact)
    except ser.ArtifactError as exc:
        raise CLIError(str(exc)) from None
    env = cfg.make_env()
    if (q.n_states, q.n_actions) != (env.n_states, env.n_actions):
        raise CLIError(
            f"artifact tables are {q.n_states} states x {q.n_actions} actions but the configured "
            f"environment has {env.n_states} states x {env.n_actions} actions"
        )
    if args.mode == "policy" and p is None:
        raise CLIError("artifact has no policy table; use --mode greedy")
    out = _out_dir(args, cfg)
    traj = evaluate_policy(env, q, args.mode, p, max_steps=cfg.training.step_cap)
    stem = Path(args.artifact).stem.removesuffix("_artifact")
    text = ser.trajectory_csv(traj, cfg.env_kind, bloch=lambda c: tuple(state_to_bloch(c)))
    _write(out / f"{stem}_trajectory.csv", text)
    _write(out / f"{stem}_actions.txt", "".join(f"{t.action}\n" for t in traj))
    if _plots_on(args, cfg):
        import numpy as np

        from qsteer import plots

        pops = np.array([abs(t.amplitudes) ** 2 for t in traj]) if cfg.env_kind == "lambda" else None
        actions = [t.action - cfg.env_config.pulse_amplitudes for t in traj] if cfg.env_kind == "lambda" else [
            t.action for t in traj
        ]
        plots.trajectory(
            actions,
            [t.fidelity for t in traj],
            out / f"{stem}_trajectory.png",
            populations=pops,
            action_axis="pulse E" if cfg.env_kind == "lambda" else "action",
        )
    last = traj[-1]
    _say(args, f"{len(traj)} steps, final fidelity {ser.fmt_real(last.fidelity) or 'n/a'}; outputs in {out}")
    return EXIT_OK


def read_pulse_file(path: str | Path, n_actions: int) -> list[int]:
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"pulse file not found: {path}")
    actions = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            a = int(text)
        except ValueError:
            raise CLIError(f"{path}:{lineno}: not an action index: {text!r}") from None
        if not 0 <= a < n_actions:
            raise CLIError(f"{path}:{lineno}: action {a} outside [0, {n_actions})")
        actions.append(a)
    if not actions:
        raise CLIError(f"{path}: pulse file is empty")
    return actions


def cmd_landscape(args, cfg: ExperimentConfig, overrides: dict[str, str]) -> int:
    env = cfg.make_env()
    if not env.supports_fidelity:
        raise CLIError(f"environment kind {cfg.env_kind!r} has no quantum states")
    actions = read_pulse_file(args.pulses, env.n_actions)
    j = transition_landscape([env.propagators[a] for a in actions], env.initial_state, env.target_state)
    print(f"J = {ser.fmt_real(j)}")
    print(f"fidelity = {ser.fmt_real(j ** 0.5)}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "evaluate": cmd_evaluate, "landscape": cmd_landscape}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = split_overrides(extra)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise CLIError("--seed must be a 64-bit unsigned integer")
        cfg = parse_config(args.config, overrides)
        if args.seed is not None:
            cfg = replace(cfg, training=replace(cfg.training, seed=args.seed))
        return COMMANDS[args.command](args, cfg, overrides)
    except (CLIError, ConfigError) as exc:
        print(f"qsteer: error: {exc}", file=sys.stderr)
        return exc.code if isinstance(exc, CLIError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
