"""Optimization harness: AdamW, cosine LR with warmup, EMA, checkpoints.

Training batches are whole-episode segments (truncated to ``max_unroll``
supervised steps) so the recurrent state always starts an episode at the
learned initializer; segments that begin mid-episode get their entry
state from a gradient-free burn-in over the preceding frames. Stateless
variants consume the identical segment stream, which keeps optimizer-step
counts and supervision counts comparable across variants.

Every random draw comes from two named streams (shuffling and noising)
whose states are serialized into checkpoints, so a paused-and-resumed run
reproduces the uninterrupted one bitwise.
"""

from __future__ import annotations

import dataclasses
import gc
import math
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .diffusion import q_sample
from .envs import DemoSet, build_targets, load_demoset
from .policy import (
    NormStats,
    PolicyHandle,
    build_policy,
    conditioning_project,
    denoiser,
    encode_obs,
    temporal_forward,
)
from .sega import LatentState, sega_step
from .seeding import make_rng
from .tensor import ContractError, ParamSet, Tensor, backward, no_grad, stack

__all__ = [
    "OptimizerState",
    "TrainingDiverged",
    "lr_at",
    "adamw_step",
    "ema_update",
    "compute_norm_stats",
    "train",
    "policy_from_checkpoint",
]

ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step in the message."""


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: ParamSet) -> "OptimizerState":
        return cls(
            m={p: np.zeros_like(t.data) for p, t in params.items()},
            v={p: np.zeros_like(t.data) for p, t in params.items()},
            step=0,
        )


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero.

    Continuous at the junction: both pieces equal base_lr at
    step == warmup_steps; exactly zero at step == total_steps.
    """
    if step < 0:
        raise ContractError("lr_at: step must be >= 0")
    w = config.warmup_steps
    if w > 0 and step < w:
        return config.base_lr * step / w
    span = max(total_steps - w, 1)
    progress = min(max((step - w) / span, 0.0), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> None:
    """Decoupled-weight-decay Adam with bias correction, in place.

    The decay group follows the parameter path: ``encoder.*`` uses the
    encoder decay, everything else the transformer decay.
    """
    opt.step += 1
    b1, b2 = config.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for path, p in params.items():
        g = grads[path]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {p.data.shape} at {path}")
        m = opt.m[path] = b1 * opt.m[path] + (1.0 - b1) * g
        v = opt.v[path] = b2 * opt.v[path] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        wd = config.weight_decay_encoder if path.startswith("encoder.") else config.weight_decay_transformer
        p.data = p.data - lr * update - (lr * wd) * p.data


def ema_update(ema: dict[str, np.ndarray], params: ParamSet, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * params, elementwise in place."""
    if set(ema) != {p for p, _ in params.items()}:
        raise ContractError("EMA manifest does not match parameter manifest")
    for path, p in params.items():
        ema[path] = decay * ema[path] + (1.0 - decay) * p.data


def compute_norm_stats(demos: DemoSet) -> NormStats:
    """Observation/pose stats are z-score; action stats are min-max.

    Actions are mapped to exactly [-1, 1] (center = midrange, scale =
    half-range) so the sampler's implied-x0 clamp at 1 matches the data
    support.
    """
    obs = np.concatenate([ep.observations for ep in demos.episodes], axis=0)
    poses = np.concatenate([ep.poses for ep in demos.episodes], axis=0)
    acts = np.concatenate([ep.actions for ep in demos.episodes], axis=0)

    def zstats(a):
        return a.mean(axis=0).astype(np.float32), np.maximum(a.std(axis=0), 1e-6).astype(np.float32)

    om, os_ = zstats(obs)
    pm, ps = zstats(poses)
    lo, hi = acts.min(axis=0), acts.max(axis=0)
    am = ((lo + hi) / 2.0).astype(np.float32)
    as_ = np.maximum((hi - lo) / 2.0, 1e-6).astype(np.float32)
    return NormStats(om, os_, pm, ps, am, as_)


# ----------------------------------------------------------------------
# sample preparation


@dataclass
class _EpisodeData:
    windows: np.ndarray  # (P, T_obs, obs_dim) normalized
    poses: np.ndarray  # (P, pose_dim) normalized
    chunks: np.ndarray  # (P, N, action_dim) normalized


@dataclass
class _Segment:
    episode: int
    start: int
    length: int


def _prepare_episodes(demos: DemoSet, norm: NormStats, t_obs: int, horizon: int) -> list[_EpisodeData]:
    out = []
    for ep in demos.episodes:
        wins, poses, chunks = [], [], []
        for w, p, c in build_targets(ep, t_obs, horizon):
            wins.append(w)
            poses.append(p)
            chunks.append(c)
        wins = (np.asarray(wins) - norm.obs_mean) / norm.obs_std
        poses = (np.asarray(poses) - norm.pose_mean) / norm.pose_std
        chunks = (np.asarray(chunks) - norm.action_mean) / norm.action_std
        out.append(
            _EpisodeData(
                windows=wins.astype(np.float32),
                poses=poses.astype(np.float32),
                chunks=chunks.astype(np.float32),
            )
        )
    return out


def _make_segments(episodes: list[_EpisodeData], max_unroll: int) -> list[_Segment]:
    segs = []
    for i, ep in enumerate(episodes):
        p = ep.windows.shape[0]
        for start in range(0, p, max_unroll):
            segs.append(_Segment(episode=i, start=start, length=min(max_unroll, p - start)))
    return segs


def _burn_in_state(policy: PolicyHandle, ep: _EpisodeData, upto: int) -> np.ndarray:
    """Gradient-free state advance over frames [0, upto) of one episode."""
    with no_grad():
        state = LatentState(s=policy.sega_params.s0.detach())
        for t in range(upto):
            o = encode_obs(Tensor(ep.windows[t]), Tensor(ep.poses[t]), policy.encoder)
            state, _, _ = sega_step(state, o, policy.sega_params, policy.config)
    return state.s.data


def _batch_loss(
    policy: PolicyHandle,
    episodes: list[_EpisodeData],
    batch: list[_Segment],
    noise_rng: np.random.Generator,
    draws: int = 1,
    loss_weighting: str = "uniform",
    min_snr_gamma: float = 5.0,
) -> tuple[Tensor, float | None]:
    """Masked diffusion loss over one batch of episode segments.

    Returns the scalar loss and the masked mean gate value (None for
    variants without a gate).
    """
    cfg = policy.config
    b = len(batch)
    t_max = max(s.length for s in batch)
    n, a = cfg.pred_horizon, cfg.action_dim
    winf = np.zeros((b, t_max, cfg.t_obs, cfg.obs_dim), dtype=np.float32)
    poses = np.zeros((b, t_max, cfg.pose_dim), dtype=np.float32)
    chunks = np.zeros((b, t_max, n, a), dtype=np.float32)
    mask = np.zeros((b, t_max), dtype=np.float32)
    for j, seg in enumerate(batch):
        ep = episodes[seg.episode]
        sl = slice(seg.start, seg.start + seg.length)
        winf[j, :seg.length] = ep.windows[sl]
        poses[j, :seg.length] = ep.poses[sl]
        chunks[j, :seg.length] = ep.chunks[sl]
        mask[j, :seg.length] = 1.0

    gate_mean: float | None = None
    if cfg.is_stateful:
        if all(s.start == 0 for s in batch):
            init = policy.sega_params.s0  # broadcast; keeps the gradient path direct
        else:
            rows = []
            for seg in batch:
                if seg.start == 0:
                    rows.append(policy.sega_params.s0)
                else:
                    rows.append(Tensor(_burn_in_state(policy, episodes[seg.episode], seg.start)))
            init = stack(rows, axis=0)
        state = LatentState(s=init)
        eobs_steps = []
        gate_rows = []
        for t in range(t_max):
            o = encode_obs(Tensor(winf[:, t]), Tensor(poses[:, t]), policy.encoder)
            state, eobs, trace = sega_step(state, o, policy.sega_params, cfg)
            eobs_steps.append(eobs)
            if trace.gate is not None:
                gate_rows.append(np.asarray(trace.mean_gate, dtype=np.float64).reshape(-1))
        cond_tokens = stack(eobs_steps, axis=1)  # (B, T, N_o, D)
        if gate_rows:
            gates = np.stack(gate_rows, axis=1)  # (B, T) or (1, T) at step one
            gates = np.broadcast_to(gates, (b, t_max))
            gate_mean = float((gates * mask).sum() / mask.sum())
    else:
        tokens = encode_obs(Tensor(winf), Tensor(poses), policy.encoder)  # (B, T, N_o, D)
        if cfg.variant == "temporal_attention":
            tokens = temporal_forward(tokens, policy.temporal)
        cond_tokens = tokens

    # several noising draws reuse one (expensive) pass over the sequence
    chunks_t = Tensor(chunks)
    abars = policy.schedule.alpha_bars
    draws = max(1, draws)
    loss = None
    for _ in range(draws):
        t_draw = noise_rng.integers(0, cfg.t_diffusion, size=(b, t_max))
        eps = noise_rng.standard_normal((b, t_max, n, a)).astype(np.float32)
        x_t = q_sample(chunks_t, t_draw, Tensor(eps), policy.schedule)
        cond = conditioning_project(cond_tokens, t_draw, policy.denoiser_params)
        eps_hat = denoiser(x_t, t_draw, cond, policy.denoiser_params)
        diff = Tensor(eps) - eps_hat
        per_pair = (diff * diff).mean(axis=(-1, -2))  # (B, T)
        weights = mask
        if loss_weighting == "min_snr":
            snr = abars[t_draw] / (1.0 - abars[t_draw])
            weights = mask * np.minimum(1.0, min_snr_gamma / snr).astype(np.float32)
        part = (per_pair * Tensor(weights)).sum() * float(1.0 / mask.sum())
        loss = part if loss is None else loss + part
    if draws > 1:
        loss = loss * float(1.0 / draws)
    return loss, gate_mean


# ----------------------------------------------------------------------
# the training loop


def _format_float(x: float) -> str:
    return repr(float(x))


def train(
    run_config: RunConfig,
    demos_path: str,
    out_dir: str,
    resume_from: str | None = None,
) -> str:
    """Train the configured variant on a demo set; returns checkpoint path.

    Writes ``train_log.csv`` (step, epoch, loss, lr, mean_gate) and the
    final ``checkpoint.spck`` (parameters, EMA weights, optimizer moments,
    and RNG states) under ``out_dir``. With ``resume_from``, training
    continues bitwise as if it had never stopped.
    """
    run_config.validate()
    cfg, tcfg = run_config.model, run_config.train
    os.makedirs(out_dir, exist_ok=True)
    demos = load_demoset(demos_path)
    if demos.manifest["obs_dim"] != cfg.obs_dim or demos.manifest["pose_dim"] != cfg.pose_dim:
        raise ContractError(
            f"demo dims (obs {demos.manifest['obs_dim']}, pose {demos.manifest['pose_dim']}) "
            f"do not match model config (obs {cfg.obs_dim}, pose {cfg.pose_dim})"
        )

    norm = compute_norm_stats(demos)
    episodes = _prepare_episodes(demos, norm, cfg.t_obs, cfg.pred_horizon)
    segments = _make_segments(episodes, tcfg.max_unroll)
    steps_per_epoch = math.ceil(len(segments) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.total_epochs
    if tcfg.warmup_steps >= total_steps:
        raise ContractError(
            f"warmup_steps {tcfg.warmup_steps} must be < total steps {total_steps}"
        )

    policy = build_policy(cfg, seed=tcfg.seed, norm=norm)
    opt = OptimizerState.fresh(policy.params)
    ema = {p: t.data.copy() for p, t in policy.params.items()}
    shuffle_rng = make_rng(tcfg.seed, "train-shuffle")
    noise_rng = make_rng(tcfg.seed, "train-noise")
    start_epoch = 0
    global_step = 0

    log_path = os.path.join(out_dir, "train_log.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.spck")

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        for path, t in policy.params.items():
            t.data = ck.arrays[path].copy()
        ema = {p: a.copy() for p, a in ck.ema_params().items()}
        opt = OptimizerState(
            m={p: a.copy() for p, a in ck.opt_moments("m").items()},
            v={p: a.copy() for p, a in ck.opt_moments("v").items()},
            step=ck.header["train_state"]["opt_step"],
        )
        shuffle_rng.bit_generator.state = ck.header["train_state"]["shuffle_rng"]
        noise_rng.bit_generator.state = ck.header["train_state"]["noise_rng"]
        start_epoch = ck.header["train_state"]["epoch"]
        global_step = ck.header["train_state"]["step"]
        norm = NormStats.from_dict(ck.header["norm"])
        policy.norm = norm
        log_mode = "a"
    else:
        log_mode = "w"

    def write_checkpoint(path: str, epoch: int) -> None:
        save_checkpoint(
            path,
            run_config,
            params={p: t.data for p, t in policy.params.items()},
            ema=ema,
            opt_m=opt.m,
            opt_v=opt.v,
            norm=norm.to_dict(),
            train_state={
                "step": global_step,
                "epoch": epoch,
                "opt_step": opt.step,
                "total_steps": total_steps,
                "shuffle_rng": shuffle_rng.bit_generator.state,
                "noise_rng": noise_rng.bit_generator.state,
            },
        )

    log = open(log_path, log_mode, encoding="utf-8")
    try:
        if log_mode == "w":
            log.write("# schema: sega-eval/1\n")
            log.write(f"# config_hash: {run_config.hash()}\n")
            log.write("step,epoch,loss,lr,mean_gate\n")
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for epoch in range(start_epoch, tcfg.total_epochs):
                order = shuffle_rng.permutation(len(segments))
                for b0 in range(0, len(segments), tcfg.batch_size):
                    batch = [segments[i] for i in order[b0:b0 + tcfg.batch_size]]
                    loss, gate_mean = _batch_loss(
                        policy, episodes, batch, noise_rng,
                        draws=tcfg.diffusion_draws,
                        loss_weighting=tcfg.loss_weighting,
                        min_snr_gamma=tcfg.min_snr_gamma,
                    )
                    loss_val = loss.item()
                    if not np.isfinite(loss_val):
                        raise TrainingDiverged(
                            f"non-finite loss {loss_val} at step {global_step} (epoch {epoch})"
                        )
                    backward(loss, policy.params)
                    lr = lr_at(global_step, tcfg, total_steps)
                    adamw_step(
                        policy.params,
                        {p: t.grad for p, t in policy.params.items()},
                        opt, lr, tcfg,
                    )
                    ema_update(ema, policy.params, tcfg.ema_decay)
                    del loss
                    if global_step % tcfg.log_every_steps == 0:
                        gate_str = "" if gate_mean is None else _format_float(gate_mean)
                        log.write(
                            f"{global_step},{epoch},{_format_float(loss_val)},"
                            f"{_format_float(lr)},{gate_str}\n"
                        )
                    global_step += 1
                gc.collect()
                if tcfg.checkpoint_every_epochs and (epoch + 1) % tcfg.checkpoint_every_epochs == 0 \
                        and (epoch + 1) < tcfg.total_epochs:
                    write_checkpoint(
                        os.path.join(out_dir, f"checkpoint_ep{epoch + 1:04d}.spck"), epoch + 1
                    )
        finally:
            if gc_was_enabled:
                gc.enable()
            gc.collect()
    finally:
        log.close()
    write_checkpoint(ckpt_path, tcfg.total_epochs)
    return ckpt_path


def policy_from_checkpoint(path_or_ckpt, use_ema: bool = True) -> PolicyHandle:
    """Rebuild a PolicyHandle from a checkpoint (EMA weights by default)."""
    ck = path_or_ckpt if not isinstance(path_or_ckpt, str) else load_checkpoint(path_or_ckpt)
    cfg = ck.run_config.model
    norm = NormStats.from_dict(ck.header["norm"]) if ck.header.get("norm") else None
    policy = build_policy(cfg, seed=ck.run_config.train.seed, norm=norm)
    source = ck.ema_params() if use_ema else ck.raw_params()
    if use_ema and not source:
        source = ck.raw_params()
    for path, t in policy.params.items():
        if path not in source:
            raise ContractError(f"checkpoint missing parameter {path}")
        t.data = source[path].copy()
    return policy
