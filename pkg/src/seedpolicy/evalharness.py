"""Closed-loop evaluation, open-loop reconstruction, and paired sign test.

Rollout evaluation steps many episodes in lockstep: each episode owns an
independent environment, latent state, and RNG stream, and the policy's
network calls are batched across the active episodes. Per-episode draws
come from per-episode streams in a fixed order, so a batched evaluation
is reproducible bitwise under a fixed seed.

The sign test uses exact integer binomial arithmetic; floating point
enters only in the final division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, RunConfig
from .diffusion import ancestral_update
from .envs import env_reset, env_step, load_demoset
from .policy import (X0_CLIP, PolicyHandle, condition_tokens, encode_obs, eps_model,
    temporal_forward)
from .sega import LatentState, sega_step
from .seeding import make_rng
from .tensor import ContractError, Tensor, no_grad

__all__ = [
    "SCHEMA",
    "RolloutReport",
    "SignTestInput",
    "UnsupportedVariant",
    "rollout_eval",
    "open_loop_eval",
    "sign_test",
    "compare_runs",
    "gate_trace_export",
    "rollout_report_to_dict",
    "horizon_sweep",
]

SCHEMA = "sega-eval/1"


class UnsupportedVariant(RuntimeError):
    """Operation requires a capability this variant does not have."""


@dataclass
class RolloutReport:
    task: str
    variant: str
    episodes: int
    successes: int
    success_rate: float
    mean_episode_length: float
    eval_seed: int
    config_hash: str
    # per-episode list of per-policy-call mean gate values; None when gateless
    gate_traces: list[list[float]] | None = None


@dataclass
class SignTestInput:
    wins: int
    losses: int
    ties: int = 0

    def validate(self) -> "SignTestInput":
        if min(self.wins, self.losses, self.ties) < 0:
            raise ContractError("sign test counts must be non-negative")
        return self


def rollout_report_to_dict(r: RolloutReport) -> dict:
    return {
        "schema": SCHEMA,
        "task": r.task,
        "variant": r.variant,
        "episodes": r.episodes,
        "successes": r.successes,
        "success_rate": r.success_rate,
        "mean_episode_length": r.mean_episode_length,
        "eval_seed": r.eval_seed,
        "config_hash": r.config_hash,
        "gate_traces": r.gate_traces,
    }


# ----------------------------------------------------------------------
# closed-loop evaluation


class _EpisodeSlot:
    """Mutable per-episode bookkeeping for the lockstep evaluator."""

    def __init__(self, env_config: EnvConfig, layout_seed: int, policy_rng, t_obs: int):
        self.state, obs = env_reset(env_config, layout_seed)
        self.frames = [obs] * t_obs  # repeat-padded history, oldest first
        self.rng = policy_rng
        self.steps = 0
        self.done = False
        self.success = False
        self.gate_trace: list[float] = []

    def window(self) -> tuple[np.ndarray, np.ndarray]:
        frames = np.asarray(self.frames[-len(self.frames):], dtype=np.float64)
        pose = np.array([self.state.arm[0], self.state.arm[1], float(self.state.gripper)])
        return frames, pose

    def push_obs(self, obs: np.ndarray) -> None:
        self.frames.pop(0)
        self.frames.append(obs)


def rollout_eval(
    policy: PolicyHandle,
    env_config: EnvConfig,
    episodes: int = 100,
    seed: int = 0,
) -> RolloutReport:
    """Seeded closed-loop evaluation with receding-horizon execution.

    Every ``exec_horizon`` environment steps the policy produces a fresh
    chunk from its current window (and, for stateful variants, a latent
    state that was reset at the episode start and advances once per call).
    """
    cfg = policy.config
    if cfg.obs_dim != env_config.obs_dim or cfg.pose_dim != env_config.pose_dim:
        raise ContractError(
            f"checkpoint dims (obs {cfg.obs_dim}) do not match env (obs {env_config.obs_dim})"
        )
    slots = []
    for i in range(episodes):
        layout_seed = int(make_rng(seed, "eval-layout", i).integers(2**62))
        slots.append(
            _EpisodeSlot(env_config, layout_seed, make_rng(seed, "eval-policy", i), cfg.t_obs)
        )
    stateful = cfg.is_stateful
    if stateful:
        s0 = policy.sega_params.s0.data
        latent = np.repeat(s0[None], episodes, axis=0).astype(s0.dtype)

    n, a = cfg.pred_horizon, cfg.action_dim
    model = eps_model(policy)
    norm = policy.norm
    while True:
        ids = [i for i, s in enumerate(slots) if not s.done]
        if not ids:
            break
        frames = np.stack([(slots[i].window()[0] - norm.obs_mean) / norm.obs_std for i in ids])
        poses = np.stack([(slots[i].window()[1] - norm.pose_mean) / norm.pose_std for i in ids])
        with no_grad():
            tokens = encode_obs(
                Tensor(frames.astype(np.float32)), Tensor(poses.astype(np.float32)),
                policy.encoder,
            )
            if stateful:
                st = LatentState(s=Tensor(latent[ids]))
                st2, eobs, trace = sega_step(st, tokens, policy.sega_params, cfg)
                latent[ids] = st2.s.data
                cond = eobs
                if trace.gate is not None:
                    mg = np.asarray(trace.mean_gate).reshape(-1)
                    for j, i in enumerate(ids):
                        slots[i].gate_trace.append(float(mg[j]))
            elif cfg.variant == "temporal_attention":
                cond = temporal_forward(tokens, policy.temporal)
            else:
                cond = tokens
            x = np.stack([slots[i].rng.standard_normal((n, a)) for i in ids]).astype(np.float32)
            for t in range(cfg.t_diffusion - 1, -1, -1):
                eps_hat = model(Tensor(x), t, cond).data
                z = None
                if t > 0:
                    z = np.stack([slots[i].rng.standard_normal((n, a)) for i in ids]).astype(np.float32)
                x = ancestral_update(x, eps_hat, t, policy.schedule, z, clip_x0=X0_CLIP)
        chunks = x * norm.action_std + norm.action_mean
        for j, i in enumerate(ids):
            slot = slots[i]
            for k in range(cfg.exec_horizon):
                if slot.done:
                    break
                _, obs, done, success = env_step(env_config, slot.state, chunks[j, k])
                slot.push_obs(obs)
                slot.steps += 1
                slot.done, slot.success = done, success

    successes = sum(s.success for s in slots)
    gate_traces = [s.gate_trace for s in slots] if (stateful and cfg.has_gate) else None
    return RolloutReport(
        task=env_config.task,
        variant=cfg.variant,
        episodes=episodes,
        successes=successes,
        success_rate=successes / episodes,
        mean_episode_length=float(np.mean([s.steps for s in slots])),
        eval_seed=seed,
        config_hash=RunConfig(model=cfg, env=env_config).hash(),
        gate_traces=gate_traces,
    )


# ----------------------------------------------------------------------
# open-loop trajectory reconstruction


def open_loop_eval(
    policy: PolicyHandle,
    demos_path: str,
    seed: int = 0,
    max_episodes: int | None = None,
) -> tuple[list[tuple[int, int, float, float]], float]:
    """Replay expert observations without feedback; score reconstruction.

    For every demo step the policy (state reset per episode, advanced per
    frame) predicts a chunk; the chunk's first action is compared to the
    recorded action. Returns (rows, normalized MSE) where rows are
    (step, dim, predicted, truth) with a running global step index, and
    the MSE is normalized by the per-dimension variance of the truth.
    """
    demos = load_demoset(demos_path)
    episodes = demos.episodes[:max_episodes] if max_episodes else demos.episodes
    cfg = policy.config
    norm = policy.norm
    n, a = cfg.pred_horizon, cfg.action_dim
    model = eps_model(policy)

    preds: list[np.ndarray] = []
    truths: list[np.ndarray] = []
    rows: list[tuple[int, int, float, float]] = []
    stateful = cfg.is_stateful
    lengths = [len(ep) - 1 for ep in episodes]
    t_max = max(lengths)
    if stateful:
        s0 = policy.sega_params.s0.data
        latent = np.repeat(s0[None], len(episodes), axis=0).astype(s0.dtype)
    rngs = [make_rng(seed, "open-loop", i) for i in range(len(episodes))]
    per_episode_preds: list[list[np.ndarray]] = [[] for _ in episodes]

    for t in range(t_max):
        ids = [i for i, p in enumerate(lengths) if t < p]
        frames = []
        poses = []
        for i in ids:
            ep = episodes[i]
            idx = [max(0, t - cfg.t_obs + 1 + j) for j in range(cfg.t_obs)]
            frames.append((ep.observations[idx] - norm.obs_mean) / norm.obs_std)
            poses.append((ep.poses[t] - norm.pose_mean) / norm.pose_std)
        frames = np.asarray(frames, dtype=np.float32)
        poses = np.asarray(poses, dtype=np.float32)
        with no_grad():
            tokens = encode_obs(Tensor(frames), Tensor(poses), policy.encoder)
            if stateful:
                st = LatentState(s=Tensor(latent[ids]))
                st2, eobs, _ = sega_step(st, tokens, policy.sega_params, cfg)
                latent[ids] = st2.s.data
                cond = eobs
            elif cfg.variant == "temporal_attention":
                cond = temporal_forward(tokens, policy.temporal)
            else:
                cond = tokens
            x = np.stack([rngs[i].standard_normal((n, a)) for i in ids]).astype(np.float32)
            for dt in range(cfg.t_diffusion - 1, -1, -1):
                eps_hat = model(Tensor(x), dt, cond).data
                z = None
                if dt > 0:
                    z = np.stack([rngs[i].standard_normal((n, a)) for i in ids]).astype(np.float32)
                x = ancestral_update(x, eps_hat, dt, policy.schedule, z, clip_x0=X0_CLIP)
        chunk = x * norm.action_std + norm.action_mean
        for j, i in enumerate(ids):
            per_episode_preds[i].append(chunk[j, 0])

    step = 0
    for i, ep in enumerate(episodes):
        for t in range(lengths[i]):
            pred = per_episode_preds[i][t]
            truth = ep.actions[t]
            preds.append(pred)
            truths.append(truth)
            for d in range(a):
                rows.append((step, d, float(pred[d]), float(truth[d])))
            step += 1
    pred_arr = np.asarray(preds)
    truth_arr = np.asarray(truths, dtype=np.float64)
    var = truth_arr.var(axis=0).mean()
    mse = ((pred_arr - truth_arr) ** 2).mean()
    nmse = float(mse / var) if var > 0 else float("inf")
    return rows, nmse


# ----------------------------------------------------------------------
# exact paired sign test


def sign_test(inp: SignTestInput) -> float:
    """Two-sided exact binomial sign test; ties excluded; p capped at 1.

    p = min(1, 2 * sum_{i=k}^{n} C(n, i) / 2^n) with n = wins + losses and
    k = max(wins, losses); p = 1 when n = 0. Exact integer arithmetic up
    to the final division.
    """
    inp.validate()
    n = inp.wins + inp.losses
    if n == 0:
        return 1.0
    k = max(inp.wins, inp.losses)
    tail = sum(math.comb(n, i) for i in range(k, n + 1))
    p = 2 * tail / (2 ** n)
    return min(1.0, p)


def compare_runs(per_task_a: dict[str, float], per_task_b: dict[str, float]) -> dict:
    """Count per-task wins/losses/ties of a over b and run the sign test."""
    if set(per_task_a) != set(per_task_b):
        raise ContractError(
            f"task lists differ: {sorted(per_task_a)} vs {sorted(per_task_b)}"
        )
    wins = losses = ties = 0
    for task in sorted(per_task_a):
        x, y = per_task_a[task], per_task_b[task]
        if x > y:
            wins += 1
        elif x < y:
            losses += 1
        else:
            ties += 1
    inp = SignTestInput(wins=wins, losses=losses, ties=ties)
    return {
        "schema": SCHEMA,
        "wins": wins,
        "losses": losses,
        "ties": ties,
        "p_value": sign_test(inp),
    }


# ----------------------------------------------------------------------
# exports


def gate_trace_export(report: RolloutReport) -> str:
    """Flat CSV (episode, step, mean_gate); only for gated variants."""
    if report.gate_traces is None:
        raise UnsupportedVariant(
            f"variant {report.variant!r} records no gate traces"
        )
    lines = [f"# schema: {SCHEMA}", f"# config_hash: {report.config_hash}",
             "episode,step,mean_gate"]
    for ep_idx, trace in enumerate(report.gate_traces):
        for step_idx, g in enumerate(trace):
            lines.append(f"{ep_idx},{step_idx},{g!r}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# horizon sweep


def horizon_sweep(
    run_config: RunConfig,
    horizons: list[int],
    out_dir: str,
    n_demos: int = 50,
    eval_episodes: int = 100,
    seeds: list[int] | None = None,
) -> str:
    """Train/evaluate the frame-stacking baseline and the recurrent policy
    across temporal horizons; one CSV row per (variant, horizon).

    The baseline varies its stacked window ``t_obs``; the recurrent policy
    keeps its per-step window fixed and varies the training unroll length
    (its effective temporal receptive field). Both columns appear in the
    CSV so either reading of "horizon" is available.
    """
    import dataclasses as _dc
    import os as _os

    from .envs import gen_demos, save_demoset
    from .training import policy_from_checkpoint, train

    if not horizons:
        raise ContractError("horizon_sweep needs a non-empty horizon list")
    seeds = seeds or [run_config.train.seed]
    _os.makedirs(out_dir, exist_ok=True)
    demos_path = _os.path.join(out_dir, "sweep_demos.spds")
    save_demoset(gen_demos(run_config.env, n_demos, seed=run_config.env.seed), demos_path)

    rows = []
    for variant in ("dp_baseline", "seed_policy"):
        for h in horizons:
            rates = []
            for s in seeds:
                rc = RunConfig(
                    model=_dc.replace(run_config.model, variant=variant),
                    train=_dc.replace(run_config.train, seed=s),
                    env=run_config.env,
                )
                if variant == "dp_baseline":
                    rc.model = _dc.replace(rc.model, t_obs=h)
                else:
                    rc.train = _dc.replace(rc.train, max_unroll=h)
                run_dir = _os.path.join(out_dir, f"{variant}_h{h}_s{s}")
                ckpt = train(rc, demos_path, run_dir)
                policy = policy_from_checkpoint(ckpt)
                report = rollout_eval(policy, run_config.env, episodes=eval_episodes, seed=s)
                rates.append(report.success_rate)
            t_obs = h if variant == "dp_baseline" else run_config.model.t_obs
            unroll = "" if variant == "dp_baseline" else str(h)
            rows.append((variant, t_obs, unroll, float(np.mean(rates))))

    csv_path = _os.path.join(out_dir, "horizon_sweep.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(f"# schema: {SCHEMA}\n")
        fh.write(f"# config_hash: {run_config.hash()}\n")
        fh.write("variant,t_obs,unroll,success_rate\n")
        for variant, t_obs, unroll, rate in rows:
            fh.write(f"{variant},{t_obs},{unroll},{rate!r}\n")
    return csv_path
