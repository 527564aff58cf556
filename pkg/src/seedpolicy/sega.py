"""Dual-stream gated temporal module with a recurrent latent state.

A stack of blocks runs two token streams in parallel: the latent-state
stream evolves an (N_s x D) state matrix by querying the current
observation tokens, while the observation stream enriches those tokens by
querying the state. The pre-softmax cross-attention logits collected from
every block and head are averaged into a per-row relevance score; its
sigmoid gates a convex fusion of the evolved state with the state the
module was called with. The state starts each episode at a learned
initializer and is propagated recurrently between calls.

All operations accept an optional leading batch axis; the public
single-sequence API uses plain (rows x features) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    FeedForwardParams,
    LogitStack,
    cross_attention,
    ffn,
    init_attention_params,
    init_ffn_params,
    mha_core,
)
from .config import ModelConfig
from .seeding import make_rng
from .tensor import (
    ContractError,
    DimensionError,
    ParamSet,
    Tensor,
    gelu,
    layer_norm,
    linear,
    sigmoid,
)

__all__ = [
    "LatentState",
    "GateTrace",
    "SegaBlockParams",
    "SegaParams",
    "init_state",
    "init_sega_params",
    "seg_gate",
    "sega_step",
    "reset",
    "rollout_states",
]

S0_INIT_STD = 0.02


@dataclass
class LatentState:
    """The evolving state matrix plus episode bookkeeping.

    ``s`` is (N_s x D), optionally with a leading batch axis during
    batched training. Right after :func:`reset`, ``s`` aliases the learned
    initializer parameter itself, so gradients reach it through the first
    step of an episode.
    """

    s: Tensor
    episode_step: int = 0
    is_initial: bool = True


@dataclass
class GateTrace:
    """Per-step gate record: per-row gate values and their mean."""

    step: int
    gate: np.ndarray | None  # (..., N_s, 1), detached; None for ungated variants
    mean_gate: float | np.ndarray | None


@dataclass
class SegaBlockParams:
    state_msa: AttentionParams
    obs_msa: AttentionParams
    update_ca: AttentionParams
    retrieval_ca: AttentionParams
    state_ffn: FeedForwardParams
    obs_ffn: FeedForwardParams
    # pre-norm gains/biases; absent when block_norm is off
    norms: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)


@dataclass
class SegaParams:
    blocks: list[SegaBlockParams]
    s0: Tensor
    heads: int
    block_norm: bool
    # two-layer gate MLP (D -> D -> 1); only for the ffn_gate variant
    gate_mlp: tuple[Tensor, Tensor, Tensor, Tensor] | None = None


def init_state(config: ModelConfig, seed: int, dtype=np.float32) -> Tensor:
    """Learned initial state: i.i.d. Gaussian(0, 0.02^2) under the seed.

    Drawn once at model construction from a stream tied to the parameter
    path, so the same seed always yields bitwise identical values.
    """
    rng = make_rng(seed, "sega.s0")
    arr = (rng.standard_normal((config.state_rows, config.d_model)) * S0_INIT_STD).astype(dtype)
    return Tensor(arr)


def init_sega_params(
    params: ParamSet,
    config: ModelConfig,
    seed: int,
    prefix: str = "sega",
    dtype=np.float32,
) -> SegaParams:
    blocks = []
    for l in range(config.depth):
        bp = f"{prefix}.block{l}"
        norms: dict[str, tuple[Tensor, Tensor]] = {}
        if config.block_norm:
            for name in ("state_msa", "obs_msa", "state_ca", "obs_ca"):
                gain = params.add(f"{bp}.ln_{name}.gain", Tensor(np.ones(config.d_model, dtype=dtype)))
                bias = params.add(f"{bp}.ln_{name}.bias", Tensor(np.zeros(config.d_model, dtype=dtype)))
                norms[name] = (gain, bias)
        blocks.append(
            SegaBlockParams(
                state_msa=init_attention_params(params, f"{bp}.state_msa", config.d_model, config.heads, seed, dtype),
                obs_msa=init_attention_params(params, f"{bp}.obs_msa", config.d_model, config.heads, seed, dtype),
                update_ca=init_attention_params(params, f"{bp}.update_ca", config.d_model, config.heads, seed, dtype),
                retrieval_ca=init_attention_params(params, f"{bp}.retrieval_ca", config.d_model, config.heads, seed, dtype),
                state_ffn=init_ffn_params(params, f"{bp}.state_ffn", config.d_model, seed, dtype=dtype),
                obs_ffn=init_ffn_params(params, f"{bp}.obs_ffn", config.d_model, seed, dtype=dtype),
                norms=norms,
            )
        )
    s0 = params.add(f"{prefix}.s0", init_state(config, seed, dtype))
    gate_mlp = None
    if config.variant == "ffn_gate":
        d = config.d_model
        w1 = make_rng(seed, f"{prefix}.gate.w1").standard_normal((d, d)) / np.sqrt(d)
        w2 = make_rng(seed, f"{prefix}.gate.w2").standard_normal((d, 1)) / np.sqrt(d)
        gate_mlp = (
            params.add(f"{prefix}.gate.w1", Tensor(w1.astype(dtype))),
            params.add(f"{prefix}.gate.b1", Tensor(np.zeros(d, dtype=dtype))),
            params.add(f"{prefix}.gate.w2", Tensor(w2.astype(dtype))),
            params.add(f"{prefix}.gate.b2", Tensor(np.zeros(1, dtype=dtype))),
        )
    return SegaParams(
        blocks=blocks,
        s0=s0,
        heads=config.heads,
        block_norm=config.block_norm,
        gate_mlp=gate_mlp,
    )


def _maybe_norm(x: Tensor, block: SegaBlockParams, name: str) -> Tensor:
    pair = block.norms.get(name)
    if pair is None:
        return x
    return layer_norm(x, pair[0], pair[1])


def _dual_stream_block(
    s: Tensor, o: Tensor, block: SegaBlockParams, stack: LogitStack
) -> tuple[Tensor, Tensor]:
    """One dual-stream exchange; appends the update-CA logits to ``stack``."""
    s1 = s + mha_core(_maybe_norm(s, block, "state_msa"), block.state_msa)
    o1 = o + mha_core(_maybe_norm(o, block, "obs_msa"), block.obs_msa)
    # both cross-attentions consume the other stream's post-MSA tokens
    s1n = _maybe_norm(s1, block, "state_ca")
    o1n = _maybe_norm(o1, block, "obs_ca")
    upd = cross_attention(s1n, o1n, block.update_ca)
    stack.append(upd.logits)
    ret = cross_attention(o1n, s1n, block.retrieval_ca)
    s2 = s1 + upd.out
    o2 = o1 + ret.out
    return ffn(s2, block.state_ffn), ffn(o2, block.obs_ffn)


def seg_gate(stack: LogitStack, config: ModelConfig) -> Tensor:
    """Per-row update gate from averaged pre-softmax logits.

    The relevance score of state row i is the mean of its logits over all
    blocks, heads, and observation tokens; the gate is its sigmoid,
    shaped (..., N_s, 1) for broadcasting over features at fusion time.
    """
    if len(stack.layers) != config.depth or stack.heads != config.heads:
        raise ContractError(
            f"logit stack holds {len(stack.layers)}x{stack.heads} entries, "
            f"expected {config.depth}x{config.heads}"
        )
    n_obs = stack.layers[0].shape[-1]
    total = None
    for layer in stack.layers:
        if layer.shape[-2:] != (config.state_rows, n_obs):
            raise ContractError(f"logit matrix shape {layer.shape[-2:]} unexpected")
        part = layer.sum(axis=(-3, -1))  # over heads and observation tokens
        total = part if total is None else total + part
    r = total * float(1.0 / (config.depth * config.heads * n_obs))
    g = sigmoid(r)
    return g.reshape(g.shape + (1,))


def _ffn_gate(inter_s: Tensor, params: SegaParams) -> Tensor:
    w1, b1, w2, b2 = params.gate_mlp
    h = gelu(linear(inter_s, w1, b1))
    return sigmoid(linear(h, w2, b2))


def _gate_for(
    inter_s: Tensor, stack: LogitStack, params: SegaParams, config: ModelConfig
) -> Tensor | None:
    if config.gate_override is not None:
        shape = inter_s.shape[:-1] + (1,)
        return Tensor(np.full(shape, config.gate_override, dtype=inter_s.dtype))
    if config.variant == "ffn_gate":
        return _ffn_gate(inter_s, params)
    if config.variant == "state_no_gate":
        return None
    return seg_gate(stack, config)


def sega_step(
    s_prev: LatentState,
    o_t: Tensor,
    params: SegaParams,
    config: ModelConfig,
) -> tuple[LatentState, Tensor, GateTrace]:
    """Advance the latent state by one observation; return enriched tokens.

    Runs the block stack, then fuses the final state-stream output with
    the state this step was entered with: ``G * inter_s + (1 - G) * s_prev``.
    With ``fuse_per_block`` the fusion instead happens after every block
    against that block's input, using only that block's logits.
    """
    if s_prev.s.shape[-2:] != (config.state_rows, config.d_model):
        raise DimensionError(f"state shape {s_prev.s.shape} != ({config.state_rows}, {config.d_model})")
    if o_t.shape[-2:] != (config.n_obs_tokens, config.d_model):
        raise DimensionError(f"obs shape {o_t.shape} != ({config.n_obs_tokens}, {config.d_model})")

    stack = LogitStack(config.heads)
    s, o = s_prev.s, o_t
    gate: Tensor | None = None
    if config.fuse_per_block:
        one_block = ModelConfig(**{**config.__dict__, "depth": 1})
        gates = []
        for block in params.blocks:
            s_in = s
            block_stack = LogitStack(config.heads)
            s, o = _dual_stream_block(s, o, block, block_stack)
            stack.append(block_stack.layers[0])
            g = _gate_for(s, block_stack, params, one_block)
            if g is not None:
                gates.append(g)
                s = g * s + (1.0 - g) * s_in
        gate = gates[-1] if gates else None
        s_t = s
    else:
        for block in params.blocks:
            s, o = _dual_stream_block(s, o, block, stack)
        inter_s = s
        gate = _gate_for(inter_s, stack, params, config)
        s_t = inter_s if gate is None else gate * inter_s + (1.0 - gate) * s_prev.s

    if gate is None:
        trace = GateTrace(step=s_prev.episode_step, gate=None, mean_gate=None)
    else:
        gvals = gate.data
        mean_axes = tuple(range(gvals.ndim - 2, gvals.ndim))
        mg = gvals.mean(axis=mean_axes)
        trace = GateTrace(
            step=s_prev.episode_step,
            gate=np.array(gvals, copy=True),
            mean_gate=float(mg) if mg.ndim == 0 else mg,
        )
    next_state = LatentState(s=s_t, episode_step=s_prev.episode_step + 1, is_initial=False)
    return next_state, o, trace


def reset(state: LatentState | None, params: SegaParams) -> LatentState:
    """Return a fresh state bound to the current learned initializer.

    The returned state references the live parameter, so it reflects any
    optimizer updates made since construction, and gradients flow into the
    initializer through the first step after a reset.
    """
    return LatentState(s=params.s0, episode_step=0, is_initial=True)


def rollout_states(
    o_sequence: list[Tensor],
    params: SegaParams,
    config: ModelConfig,
    episode_breaks: list[int] | None = None,
) -> list[tuple[LatentState, Tensor, GateTrace]]:
    """Step sequentially over observations, resetting at episode breaks.

    A break at index t resets the state to the learned initializer before
    step t is processed, so outputs from t onward depend only on
    observations since the break.
    """
    breaks = sorted(set(episode_breaks or []))
    if episode_breaks is not None and list(episode_breaks) != breaks:
        raise ContractError("episode_breaks must be sorted and unique")
    if breaks and (breaks[0] < 0 or breaks[-1] >= len(o_sequence)):
        raise ContractError("episode_breaks out of range")
    break_set = set(breaks)
    out = []
    state = reset(None, params)
    for t, o_t in enumerate(o_sequence):
        if t in break_set:
            state = reset(state, params)
        state, eobs, trace = sega_step(state, o_t, params, config)
        out.append((state, eobs, trace))
    return out
