"""Command-line entry point covering the full workflow.

Subcommands: ``gen-demos`` (scripted-expert datasets), ``train``,
``eval`` (closed-loop, open-loop, gate export), ``gradcheck`` (the
finite-difference verification suite), ``sweep`` (horizon scaling), and
``compare`` (paired exact sign test over per-task results).

Config precedence: flags > ``--config`` file > ``--preset``. The
environment variable ``SEGA_SEED`` is the seed fallback when ``--seed``
is not given. Exit codes: 0 success, 1 check/assertion failure, 2
usage/input error. All outputs are byte-deterministic under fixed flags.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click
import numpy as np

from . import envs as envs_mod
from .config import (
    PRESETS,
    ConfigError,
    RunConfig,
    canonical_json,
    load_run_config,
)
from .evalharness import (
    SCHEMA,
    UnsupportedVariant,
    compare_runs,
    gate_trace_export,
    horizon_sweep,
    open_loop_eval,
    rollout_eval,
    rollout_report_to_dict,
)
from .gradcheck_suite import DEFAULT_TOLERANCE, run_gradcheck
from .tensor import ContractError

VARIANT_FLAGS = {
    "seed": "seed_policy",
    "dp": "dp_baseline",
    "temp-attn": "temporal_attention",
    "ffn-gate": "ffn_gate",
    "state": "state_no_gate",
}

TASK_FLAGS = {
    "looping": "looping_place_retrieval",
    "looping_place_retrieval": "looping_place_retrieval",
    "sequential": "sequential_picking",
    "sequential_picking": "sequential_picking",
}


def _resolve_seed(seed: int | None, fallback: int = 0) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("SEGA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise click.UsageError(f"SEGA_SEED must be an integer, got {env!r}") from e
    return fallback


def _load_config(config_path: str | None, preset: str, overrides: dict) -> RunConfig:
    try:
        return load_run_config(config_path, preset=preset, overrides=overrides)
    except (ConfigError, OSError) as e:
        raise click.UsageError(str(e)) from e


@click.group()
def main() -> None:
    """Desk-scale gated recurrent-state imitation learning toolkit."""


@main.command("gen-demos")
@click.option("--task", default="looping", type=click.Choice(sorted(TASK_FLAGS)), show_default=True)
@click.option("--n", default=50, show_default=True, help="Number of expert episodes.")
@click.option("--seed", type=int, default=None, help="Base seed (SEGA_SEED fallback).")
@click.option("--out", required=True, type=click.Path(dir_okay=False, writable=True))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--preset", default="desk-small", type=click.Choice(sorted(PRESETS)), show_default=True)
def cmd_gen_demos(task, n, seed, out, config_path, preset) -> None:
    """Generate a scripted-expert demonstration file (SPDS1)."""
    if n < 1:
        raise click.UsageError("--n must be >= 1")
    rc = _load_config(config_path, preset, {"env": {"task": TASK_FLAGS[task]}})
    seed = _resolve_seed(seed, fallback=rc.env.seed)
    try:
        demos = envs_mod.gen_demos(rc.env, n, seed)
    except envs_mod.EnvError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    envs_mod.save_demoset(demos, out)
    m = demos.manifest
    click.echo(canonical_json({
        "schema": "SPDS1", "task": m["task"], "episodes": m["n_episodes"],
        "rerolls": m["rerolls"], "config_hash": m["config_hash"],
        "lengths": [min(m["lengths"]), max(m["lengths"])], "path": out,
    }))


@main.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--preset", default="desk-small", type=click.Choice(sorted(PRESETS)), show_default=True)
@click.option("--demos", "demos_path", required=True, type=click.Path(dir_okay=False))
@click.option("--variant", default="seed", type=click.Choice(sorted(VARIANT_FLAGS)), show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None, help="Override total epochs.")
@click.option("--resume-from", type=click.Path(exists=True, dir_okay=False), default=None)
def cmd_train(config_path, preset, demos_path, variant, out_dir, seed, epochs, resume_from) -> None:
    """Train one policy variant on a demo set."""
    from .training import TrainingDiverged, train

    if not os.path.exists(demos_path):
        raise click.UsageError(f"demo dataset not found: {demos_path}")
    overrides: dict = {"model": {"variant": VARIANT_FLAGS[variant]}, "train": {}}
    if seed is not None or "SEGA_SEED" in os.environ:
        overrides["train"]["seed"] = _resolve_seed(seed)
    if epochs is not None:
        overrides["train"]["total_epochs"] = epochs
    rc = _load_config(config_path, preset, overrides)
    demos = envs_mod.load_demoset(demos_path)
    rc.model.obs_dim = demos.manifest["obs_dim"]
    rc.model.pose_dim = demos.manifest["pose_dim"]
    try:
        ckpt = train(rc, demos_path, out_dir, resume_from=resume_from)
    except TrainingDiverged as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    except ContractError as e:
        raise click.UsageError(str(e)) from e
    click.echo(canonical_json({"schema": SCHEMA, "checkpoint": ckpt,
                               "config_hash": rc.hash(), "variant": rc.model.variant}))


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--episodes", default=100, show_default=True)
@click.option("--seeds", default="0", show_default=True, help="Comma-separated eval seeds.")
@click.option("--open-loop", "open_loop", is_flag=True, help="Also run open-loop reconstruction.")
@click.option("--demos", "demos_path", type=click.Path(dir_okay=False), default=None,
              help="Demo set for --open-loop.")
@click.option("--gate-csv", "gate_csv", type=click.Path(dir_okay=False), default=None,
              help="Write per-step gate traces to this CSV.")
@click.option("--open-loop-csv", "open_loop_csv", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the JSON report here.")
@click.option("--raw-weights", is_flag=True, help="Evaluate raw instead of EMA weights.")
def cmd_eval(ckpt, episodes, seeds, open_loop, demos_path, gate_csv, open_loop_csv,
             out_path, raw_weights) -> None:
    """Closed-loop rollouts (and optional open-loop reconstruction)."""
    from .checkpoint import CheckpointError, load_checkpoint
    from .training import policy_from_checkpoint

    try:
        ck = load_checkpoint(ckpt)
    except CheckpointError as e:
        raise click.UsageError(str(e)) from e
    try:
        seed_list = [int(s) for s in seeds.split(",") if s != ""]
    except ValueError as e:
        raise click.UsageError(f"--seeds must be comma-separated integers: {seeds!r}") from e
    if not seed_list:
        raise click.UsageError("--seeds must name at least one seed")

    env_config = ck.run_config.env
    result: dict = {"schema": SCHEMA, "checkpoint": ckpt,
                    "variant": ck.run_config.model.variant,
                    "config_hash": ck.run_config.hash(), "reports": {}}
    reports = []
    for s in seed_list:
        policy = policy_from_checkpoint(ck, use_ema=not raw_weights)
        try:
            rep = rollout_eval(policy, env_config, episodes=episodes, seed=s)
        except ContractError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        reports.append(rep)
        result["reports"][str(s)] = rollout_report_to_dict(rep)
    result["mean_success_rate"] = float(np.mean([r.success_rate for r in reports]))

    if gate_csv is not None:
        try:
            csv_text = gate_trace_export(reports[0])
        except UnsupportedVariant as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        with open(gate_csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        result["gate_csv"] = gate_csv

    if open_loop:
        if demos_path is None:
            raise click.UsageError("--open-loop requires --demos")
        policy = policy_from_checkpoint(ck, use_ema=not raw_weights)
        rows, nmse = open_loop_eval(policy, demos_path, seed=seed_list[0])
        result["open_loop_nmse"] = nmse
        if open_loop_csv is not None:
            with open(open_loop_csv, "w", encoding="utf-8") as fh:
                fh.write(f"# schema: {SCHEMA}\n")
                fh.write(f"# config_hash: {ck.run_config.hash()}\n")
                fh.write("step,dim,predicted,truth\n")
                for step, dim, pred, truth in rows:
                    fh.write(f"{step},{dim},{pred!r},{truth!r}\n")
            result["open_loop_csv"] = open_loop_csv

    text = canonical_json(result)
    click.echo(text)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


@main.command("gradcheck")
@click.option("--corrupt", is_flag=True, hidden=True,
              help="Negative control: corrupt one analytic gradient.")
@click.option("--tolerance", default=DEFAULT_TOLERANCE, show_default=True)
def cmd_gradcheck(corrupt, tolerance) -> None:
    """Finite-difference gradient verification across all modules."""
    results = run_gradcheck(corrupt=corrupt)
    ok = True
    for module, err in results.items():
        status = "pass" if err < tolerance else "FAIL"
        ok = ok and err < tolerance
        click.echo(f"{module:10s} max_rel_err={err:.3e} {status}")
    if not ok:
        worst = max(results, key=results.get)
        click.echo(f"worst module: {worst} ({results[worst]:.3e} >= {tolerance})", err=True)
        sys.exit(1)


@main.command("sweep")
@click.option("--horizons", required=True, help="Comma-separated horizon values.")
@click.option("--task", default="looping", type=click.Choice(sorted(TASK_FLAGS)), show_default=True)
@click.option("--seeds", default="0", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--preset", default="desk-small", type=click.Choice(sorted(PRESETS)), show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--demos-n", default=50, show_default=True)
@click.option("--episodes", default=100, show_default=True)
def cmd_sweep(horizons, task, seeds, config_path, preset, out_dir, demos_n, episodes) -> None:
    """Horizon-scaling comparison of the stacking baseline vs the
    recurrent policy."""
    try:
        horizon_list = [int(h) for h in horizons.split(",") if h != ""]
        seed_list = [int(s) for s in seeds.split(",") if s != ""]
    except ValueError as e:
        raise click.UsageError("--horizons/--seeds must be comma-separated integers") from e
    if not horizon_list:
        raise click.UsageError("--horizons must name at least one horizon")
    rc = _load_config(config_path, preset, {"env": {"task": TASK_FLAGS[task]}})
    rc.model.obs_dim = rc.env.obs_dim
    rc.model.pose_dim = rc.env.pose_dim
    csv_path = horizon_sweep(rc, horizon_list, out_dir, n_demos=demos_n,
                             eval_episodes=episodes, seeds=seed_list)
    click.echo(canonical_json({"schema": SCHEMA, "csv": csv_path}))


@main.command("compare")
@click.option("--reports", required=True,
              help="Two report JSON paths, comma-separated: a.json,b.json")
def cmd_compare(reports) -> None:
    """Paired two-sided exact sign test between two result sets."""
    paths = [p for p in reports.split(",") if p]
    if len(paths) != 2:
        raise click.UsageError("--reports needs exactly two comma-separated paths")
    sides = []
    for path in paths:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise click.UsageError(f"cannot read report {path}: {e}") from e
        if "tasks" in doc:
            sides.append({str(k): float(v) for k, v in doc["tasks"].items()})
        elif "task" in doc and "success_rate" in doc:
            sides.append({str(doc["task"]): float(doc["success_rate"])})
        elif "reports" in doc:
            # multi-seed eval output: mean success per task
            per_task: dict[str, list[float]] = {}
            for rep in doc["reports"].values():
                per_task.setdefault(rep["task"], []).append(rep["success_rate"])
            sides.append({t: float(np.mean(v)) for t, v in per_task.items()})
        else:
            raise click.UsageError(f"unrecognized report structure in {path}")
    try:
        summary = compare_runs(sides[0], sides[1])
    except ContractError as e:
        raise click.UsageError(str(e)) from e
    click.echo(canonical_json(summary))


if __name__ == "__main__":
    main()
