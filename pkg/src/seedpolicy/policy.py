"""Full policy pipeline: encoder, temporal module variants, action expert.

Five variants share the same encoder and diffusion action expert and
differ only in how observation tokens are (or are not) enriched over time:

- ``seed_policy``: recurrent latent state with the logit-derived gate
- ``state_no_gate``: recurrent latent state, fusion bypassed (full overwrite)
- ``ffn_gate``: recurrent latent state, gate from an MLP on the evolved state
- ``temporal_attention``: self-attention stack over the stacked-frame tokens
- ``dp_baseline``: frame-stacked tokens condition the expert directly

Observations and actions are normalized with dataset statistics carried on
the policy handle; the environment-facing API speaks raw units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    FeedForwardParams,
    ffn,
    init_attention_params,
    init_ffn_params,
    mha_core,
)
from .config import ModelConfig
from .diffusion import ActionChunk, DiffusionSchedule, build_schedule, ddpm_sample
from .sega import GateTrace, LatentState, SegaParams, init_sega_params, reset, sega_step
from .seeding import make_rng
from .tensor import (
    ContractError,
    DimensionError,
    ParamSet,
    Tensor,
    concat,
    gelu,
    layer_norm,
    linear,
    no_grad,
)

__all__ = [
    "X0_CLIP",
    "ObservationWindow",
    "EncoderParams",
    "TemporalBlockParams",
    "DenoiserParams",
    "NormStats",
    "PolicyHandle",
    "build_policy",
    "encode_obs",
    "temporal_forward",
    "sinusoid_embed",
    "conditioning_project",
    "denoiser",
    "eps_model",
    "condition_tokens",
    "normalize_window",
    "forward_action",
]


# actions are min-max normalized to [-1, 1]; the sampler clamps its
# implied clean sample to the same range
X0_CLIP = 1.0


@dataclass
class ObservationWindow:
    """T_obs stacked observation vectors (oldest first) plus proprioception."""

    frames: np.ndarray  # (T_obs, obs_dim)
    pose: np.ndarray  # (pose_dim,)


@dataclass
class EncoderParams:
    frame_w1: Tensor
    frame_b1: Tensor
    frame_w2: Tensor
    frame_b2: Tensor
    pose_w1: Tensor
    pose_b1: Tensor
    pose_w2: Tensor
    pose_b2: Tensor


@dataclass
class TemporalBlockParams:
    ln_gain: Tensor
    ln_bias: Tensor
    attn: AttentionParams
    ffn: FeedForwardParams


@dataclass
class DenoiserBlockParams:
    """Pre-norm attention + FFN with FiLM modulation from the conditioning.

    The conditioning vector produces a per-sample scale and shift applied
    to the normalized tokens before attention, so every block reads the
    conditioning directly; without this the signal decays through the
    stack and samples drift to the wrong mode at high noise levels.
    """

    ln_gain: Tensor
    ln_bias: Tensor
    film_scale_w: Tensor
    film_scale_b: Tensor
    film_shift_w: Tensor
    film_shift_b: Tensor
    attn: AttentionParams
    ffn: FeedForwardParams


@dataclass
class DenoiserParams:
    in_w: Tensor
    in_b: Tensor
    pos: Tensor  # (pred_horizon, width) learned positions
    cond_w: Tensor
    cond_b: Tensor
    blocks: list[DenoiserBlockParams]
    final_gain: Tensor
    final_bias: Tensor
    out_w: Tensor
    out_b: Tensor


@dataclass
class NormStats:
    """Per-dimension dataset statistics used to whiten inputs and targets."""

    obs_mean: np.ndarray
    obs_std: np.ndarray
    pose_mean: np.ndarray
    pose_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def identity(cls, obs_dim: int, pose_dim: int, action_dim: int) -> "NormStats":
        return cls(
            obs_mean=np.zeros(obs_dim, dtype=np.float32),
            obs_std=np.ones(obs_dim, dtype=np.float32),
            pose_mean=np.zeros(pose_dim, dtype=np.float32),
            pose_std=np.ones(pose_dim, dtype=np.float32),
            action_mean=np.zeros(action_dim, dtype=np.float32),
            action_std=np.ones(action_dim, dtype=np.float32),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("obs_mean", "obs_std", "pose_mean", "pose_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float32) for k, v in d.items()})


@dataclass
class PolicyHandle:
    """Parameters plus (for stateful variants) the owned latent state."""

    config: ModelConfig
    params: ParamSet
    encoder: EncoderParams
    denoiser_params: DenoiserParams
    schedule: DiffusionSchedule
    sega_params: SegaParams | None = None
    temporal: list[TemporalBlockParams] | None = None
    norm: NormStats | None = None
    state: LatentState | None = None

    def reset_state(self) -> None:
        if self.config.is_stateful:
            self.state = reset(self.state, self.sega_params)
        else:
            self.state = None


def _lin_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


def _mlp_params(params: ParamSet, prefix: str, d_in: int, d_hidden: int, d_out: int,
                seed: int, dtype) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    w1 = params.add(f"{prefix}.w1", Tensor(_lin_init(make_rng(seed, f"{prefix}.w1"), d_in, d_hidden, dtype)))
    b1 = params.add(f"{prefix}.b1", Tensor(np.zeros(d_hidden, dtype=dtype)))
    w2 = params.add(f"{prefix}.w2", Tensor(_lin_init(make_rng(seed, f"{prefix}.w2"), d_hidden, d_out, dtype)))
    b2 = params.add(f"{prefix}.b2", Tensor(np.zeros(d_out, dtype=dtype)))
    return w1, b1, w2, b2


def _temporal_block(params: ParamSet, prefix: str, d: int, heads: int, seed: int,
                    dtype) -> TemporalBlockParams:
    return TemporalBlockParams(
        ln_gain=params.add(f"{prefix}.ln.gain", Tensor(np.ones(d, dtype=dtype))),
        ln_bias=params.add(f"{prefix}.ln.bias", Tensor(np.zeros(d, dtype=dtype))),
        attn=init_attention_params(params, f"{prefix}.attn", d, heads, seed, dtype),
        ffn=init_ffn_params(params, f"{prefix}.ffn", d, seed, dtype=dtype),
    )


def _denoiser_block(params: ParamSet, prefix: str, d: int, heads: int, seed: int,
                    dtype) -> DenoiserBlockParams:
    # FiLM projections start small so the block begins near plain pre-LN
    def small(name):
        arr = make_rng(seed, f"{prefix}.{name}").standard_normal((d, d)) * (0.1 / np.sqrt(d))
        return params.add(f"{prefix}.{name}", Tensor(arr.astype(dtype)))

    return DenoiserBlockParams(
        ln_gain=params.add(f"{prefix}.ln.gain", Tensor(np.ones(d, dtype=dtype))),
        ln_bias=params.add(f"{prefix}.ln.bias", Tensor(np.zeros(d, dtype=dtype))),
        film_scale_w=small("film_scale.w"),
        film_scale_b=params.add(f"{prefix}.film_scale.b", Tensor(np.zeros(d, dtype=dtype))),
        film_shift_w=small("film_shift.w"),
        film_shift_b=params.add(f"{prefix}.film_shift.b", Tensor(np.zeros(d, dtype=dtype))),
        attn=init_attention_params(params, f"{prefix}.attn", d, heads, seed, dtype),
        ffn=init_ffn_params(params, f"{prefix}.ffn", d, seed, dtype=dtype),
    )


def build_policy(config: ModelConfig, seed: int, dtype=np.float32,
                 norm: NormStats | None = None) -> PolicyHandle:
    """Construct and register all parameters for the configured variant."""
    config.validate()
    if config.d_model % 2 != 0:
        raise ContractError("d_model must be even (sinusoidal timestep embedding)")
    params = ParamSet()
    d = config.d_model

    fw1, fb1, fw2, fb2 = _mlp_params(params, "encoder.frame", config.obs_dim, d, d, seed, dtype)
    pw1, pb1, pw2, pb2 = _mlp_params(params, "encoder.pose", config.pose_dim, d, d, seed, dtype)
    encoder = EncoderParams(fw1, fb1, fw2, fb2, pw1, pb1, pw2, pb2)

    sega_params = None
    temporal = None
    if config.is_stateful:
        sega_params = init_sega_params(params, config, seed, dtype=dtype)
    elif config.variant == "temporal_attention":
        temporal = [
            _temporal_block(params, f"temporal.block{i}", d, config.heads, seed, dtype)
            for i in range(config.depth)
        ]

    den_blocks = [
        _denoiser_block(params, f"denoiser.block{i}", d, config.denoiser_heads, seed, dtype)
        for i in range(config.denoiser_depth)
    ]
    pos = make_rng(seed, "denoiser.pos").standard_normal((config.pred_horizon, d)) * 0.02
    den = DenoiserParams(
        in_w=params.add("denoiser.in.w", Tensor(_lin_init(make_rng(seed, "denoiser.in.w"), config.action_dim, d, dtype))),
        in_b=params.add("denoiser.in.b", Tensor(np.zeros(d, dtype=dtype))),
        pos=params.add("denoiser.pos", Tensor(pos.astype(dtype))),
        cond_w=params.add("condproj.w", Tensor(_lin_init(make_rng(seed, "condproj.w"), 2 * d, d, dtype))),
        cond_b=params.add("condproj.b", Tensor(np.zeros(d, dtype=dtype))),
        blocks=den_blocks,
        final_gain=params.add("denoiser.final.gain", Tensor(np.ones(d, dtype=dtype))),
        final_bias=params.add("denoiser.final.bias", Tensor(np.zeros(d, dtype=dtype))),
        out_w=params.add("denoiser.out.w", Tensor(_lin_init(make_rng(seed, "denoiser.out.w"), d, config.action_dim, dtype))),
        out_b=params.add("denoiser.out.b", Tensor(np.zeros(config.action_dim, dtype=dtype))),
    )

    if norm is None:
        norm = NormStats.identity(config.obs_dim, config.pose_dim, config.action_dim)
    return PolicyHandle(
        config=config,
        params=params,
        encoder=encoder,
        denoiser_params=den,
        schedule=build_schedule(config.t_diffusion),
        sega_params=sega_params,
        temporal=temporal,
        norm=norm,
    )


def encode_obs(frames: Tensor, pose: Tensor, enc: EncoderParams) -> Tensor:
    """One token per frame through a shared MLP, plus one pose token.

    ``frames`` is (..., T_obs, obs_dim); ``pose`` is (..., pose_dim).
    Tokens come out oldest-first with the pose token last.
    """
    f = gelu(linear(frames, enc.frame_w1, enc.frame_b1))
    f = linear(f, enc.frame_w2, enc.frame_b2)
    p = pose.reshape(pose.shape[:-1] + (1, pose.shape[-1]))
    p = gelu(linear(p, enc.pose_w1, enc.pose_b1))
    p = linear(p, enc.pose_w2, enc.pose_b2)
    return concat([f, p], axis=-2)


def temporal_forward(tokens: Tensor, blocks: list[TemporalBlockParams]) -> Tensor:
    """Pre-norm residual self-attention stack over observation tokens."""
    x = tokens
    for b in blocks:
        x = x + mha_core(layer_norm(x, b.ln_gain, b.ln_bias), b.attn)
        x = ffn(x, b.ffn)
    return x


def sinusoid_embed(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sinusoidal embedding of (possibly batched) integer steps."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def conditioning_project(eobs: Tensor, t, den: DenoiserParams) -> Tensor:
    """Mean-pool tokens, append the timestep embedding, project to width D."""
    pooled = eobs.mean(axis=-2)
    d = pooled.shape[-1]
    emb = sinusoid_embed(t, d, dtype=pooled.dtype)
    emb = np.broadcast_to(emb, pooled.shape[:-1] + (d,))
    return linear(concat([pooled, Tensor(np.ascontiguousarray(emb))], axis=-1),
                  den.cond_w, den.cond_b)


def denoiser(x_t: Tensor, t, cond: Tensor, den: DenoiserParams) -> Tensor:
    """Transformer over the N action tokens, conditioned at every block.

    The conditioning vector is added to the input tokens and additionally
    modulates each block's normalized tokens with a FiLM scale/shift, so
    the conditional mode survives all the way from pure noise.
    """
    if x_t.shape[-2] != den.pos.shape[0]:
        raise DimensionError(f"denoiser expects {den.pos.shape[0]} action tokens, got {x_t.shape[-2]}")
    cond_tok = cond.reshape(cond.shape[:-1] + (1, cond.shape[-1]))
    tok = linear(x_t, den.in_w, den.in_b) + den.pos
    tok = tok + cond_tok
    for b in den.blocks:
        scale = linear(cond_tok, b.film_scale_w, b.film_scale_b)
        shift = linear(cond_tok, b.film_shift_w, b.film_shift_b)
        h = layer_norm(tok, b.ln_gain, b.ln_bias)
        h = h * (1.0 + scale) + shift
        tok = tok + mha_core(h, b.attn)
        tok = ffn(tok, b.ffn)
    h = layer_norm(tok, den.final_gain, den.final_bias)
    return linear(h, den.out_w, den.out_b)


def eps_model(policy: PolicyHandle):
    """Denoiser closure with the contract (x_t, t, cond_tokens) -> eps_hat."""

    def model(x_t: Tensor, t, cond_tokens: Tensor) -> Tensor:
        cv = conditioning_project(cond_tokens, t, policy.denoiser_params)
        return denoiser(x_t, t, cv, policy.denoiser_params)

    return model


def condition_tokens(
    policy: PolicyHandle, frames: Tensor, pose: Tensor, state: LatentState | None
) -> tuple[Tensor, LatentState | None, GateTrace | None]:
    """Encode a window and apply the variant's temporal module.

    Returns the conditioning tokens, the advanced state (stateful variants
    only), and the gate trace when one exists.
    """
    tokens = encode_obs(frames, pose, policy.encoder)
    cfg = policy.config
    if cfg.is_stateful:
        if state is None:
            raise ContractError(
                f"variant {cfg.variant!r} requires a state reset before forward_action"
            )
        new_state, eobs, trace = sega_step(state, tokens, policy.sega_params, cfg)
        return eobs, new_state, trace
    if cfg.variant == "temporal_attention":
        return temporal_forward(tokens, policy.temporal), None, None
    return tokens, None, None  # dp_baseline: condition on the raw window tokens


def normalize_window(policy: PolicyHandle, window: ObservationWindow) -> tuple[np.ndarray, np.ndarray]:
    n = policy.norm
    frames = (window.frames - n.obs_mean) / n.obs_std
    pose = (window.pose - n.pose_mean) / n.pose_std
    return frames.astype(np.float32), pose.astype(np.float32)


def forward_action(
    policy: PolicyHandle, window: ObservationWindow, rng: np.random.Generator
) -> tuple[ActionChunk, GateTrace | None]:
    """Sample one action chunk for the current window (closed-loop entry).

    Stateful variants advance their latent state by one step; the chunk is
    produced with full-step ancestral sampling and returned in raw action
    units.
    """
    cfg = policy.config
    frames, pose = normalize_window(policy, window)
    if frames.shape != (cfg.t_obs, cfg.obs_dim):
        raise DimensionError(f"window frames shape {frames.shape} != ({cfg.t_obs}, {cfg.obs_dim})")
    with no_grad():
        tokens, new_state, trace = condition_tokens(
            policy, Tensor(frames), Tensor(pose), policy.state
        )
        if new_state is not None:
            policy.state = LatentState(
                s=new_state.s.detach(),
                episode_step=new_state.episode_step,
                is_initial=False,
            )
        chunk_n = ddpm_sample(
            eps_model(policy), tokens, policy.schedule, rng,
            shape=(cfg.pred_horizon, cfg.action_dim), clip_x0=X0_CLIP,
        )
    actions = chunk_n * policy.norm.action_std + policy.norm.action_mean
    return ActionChunk(actions.astype(np.float64)), trace
