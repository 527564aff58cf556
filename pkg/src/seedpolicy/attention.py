"""Multi-head self-attention and cross-attention building blocks.

Self-attention carries its residual connection inside the operation
(``mha_self(x) = x + MSA(x)``); cross-attention returns both the attended
output and the pre-softmax logits of every head, because the gating
mechanism downstream consumes raw logits as relevance signals. "Pre-softmax
logits" here always means the 1/sqrt(d_k)-scaled scores, i.e. exactly the
tensor fed into the row softmax.

All operations accept arbitrary leading batch axes; token and feature
axes are the last two. Head 0 is always concatenated first, so outputs
are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import make_rng
from .tensor import (
    DimensionError,
    ParamSet,
    Tensor,
    gelu,
    layer_norm,
    linear,
    linear_split_heads,
    matmul,
    matmul_scaled_t,
    merge_heads_linear,
    softmax_rows,
    take_index,
    transpose,
)

__all__ = [
    "AttentionParams",
    "FeedForwardParams",
    "CrossAttentionResult",
    "LogitStack",
    "init_attention_params",
    "init_ffn_params",
    "scaled_logits",
    "mha_core",
    "mha_self",
    "cross_attention",
    "ffn",
]


@dataclass
class AttentionParams:
    """Packed per-head q/k/v projections plus the output projection.

    All four weight matrices are D x D with the H heads of size
    d_k = D / H laid out contiguously along the output axis. The key
    projection carries no bias: adding one shifts every logit row by a
    constant, which the row softmax cancels exactly, so such a parameter
    would be permanently gradient-free.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class FeedForwardParams:
    """Pre-norm two-layer MLP: x + W2 . GELU(W1 . LN(x))."""

    ln_gain: Tensor
    ln_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class CrossAttentionResult:
    out: Tensor
    logits: Tensor  # (..., H, n_q, n_k), scaled, pre-softmax

    def per_head(self) -> list[Tensor]:
        h_axis = self.logits.data.ndim - 3
        return [take_index(self.logits, h, h_axis) for h in range(self.logits.shape[h_axis])]


class LogitStack:
    """Ordered pre-softmax logits collected across blocks and heads.

    One stacked tensor of shape (..., H, N_s, N_o) per block, in block
    order; ``entries()`` flattens to (layer, head, matrix) triples.
    """

    def __init__(self, heads: int):
        self.heads = heads
        self.layers: list[Tensor] = []

    def append(self, logits: Tensor) -> None:
        h_axis = logits.data.ndim - 3
        if logits.shape[h_axis] != self.heads:
            raise DimensionError(
                f"logit stack expects {self.heads} heads, got {logits.shape[h_axis]}"
            )
        self.layers.append(logits)

    def count(self) -> int:
        return len(self.layers) * self.heads

    def entries(self) -> list[tuple[int, int, Tensor]]:
        out = []
        for l, layer in enumerate(self.layers, start=1):
            h_axis = layer.data.ndim - 3
            for h in range(self.heads):
                out.append((l, h + 1, take_index(layer, h, h_axis)))
        return out


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = 1.0 / np.sqrt(fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


def init_attention_params(
    params: ParamSet,
    prefix: str,
    d_model: int,
    heads: int,
    seed: int,
    dtype=np.float32,
) -> AttentionParams:
    """Create and register q/k/v/o projections under ``prefix``.

    Each weight draws from its own path-derived stream, so initialization
    is independent of registration order.
    """
    if d_model % heads != 0:
        raise DimensionError(f"d_model {d_model} not divisible by heads {heads}")

    def w(name: str) -> Tensor:
        path = f"{prefix}.{name}"
        arr = _init_weight(make_rng(seed, path), d_model, d_model, dtype)
        return params.add(path, Tensor(arr))

    def b(name: str) -> Tensor:
        return params.add(f"{prefix}.{name}", Tensor(np.zeros(d_model, dtype=dtype)))

    return AttentionParams(
        wq=w("wq"), bq=b("bq"),
        wk=w("wk"),
        wv=w("wv"), bv=b("bv"),
        wo=w("wo"), bo=b("bo"),
        heads=heads,
    )


def init_ffn_params(
    params: ParamSet,
    prefix: str,
    d_model: int,
    seed: int,
    hidden_multiplier: int = 4,
    dtype=np.float32,
) -> FeedForwardParams:
    hidden = d_model * hidden_multiplier
    return FeedForwardParams(
        ln_gain=params.add(f"{prefix}.ln_gain", Tensor(np.ones(d_model, dtype=dtype))),
        ln_bias=params.add(f"{prefix}.ln_bias", Tensor(np.zeros(d_model, dtype=dtype))),
        w1=params.add(
            f"{prefix}.w1",
            Tensor(_init_weight(make_rng(seed, f"{prefix}.w1"), d_model, hidden, dtype)),
        ),
        b1=params.add(f"{prefix}.b1", Tensor(np.zeros(hidden, dtype=dtype))),
        w2=params.add(
            f"{prefix}.w2",
            Tensor(_init_weight(make_rng(seed, f"{prefix}.w2"), hidden, d_model, dtype)),
        ),
        b2=params.add(f"{prefix}.b2", Tensor(np.zeros(d_model, dtype=dtype))),
    )


def scaled_logits(q_tokens: Tensor, k_tokens: Tensor) -> Tensor:
    """(q . k^T) / sqrt(d_k): the pre-softmax attention scores."""
    if q_tokens.shape[-1] != k_tokens.shape[-1]:
        raise DimensionError(
            f"scaled_logits: d_k mismatch {q_tokens.shape[-1]} vs {k_tokens.shape[-1]}"
        )
    d_k = q_tokens.shape[-1]
    kt = transpose(k_tokens, _swap_last2(k_tokens.data.ndim))
    return matmul(q_tokens, kt) * float(1.0 / np.sqrt(d_k))


def _swap_last2(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _attend(q_tokens: Tensor, kv_tokens: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Shared attention core; returns (output, per-head scaled logits)."""
    q = linear_split_heads(q_tokens, p.wq, p.bq, p.heads)
    k = linear_split_heads(kv_tokens, p.wk, None, p.heads)
    v = linear_split_heads(kv_tokens, p.wv, p.bv, p.heads)
    logits = matmul_scaled_t(q, k, 1.0 / np.sqrt(p.d_head))
    weights = softmax_rows(logits)
    ctx = matmul(weights, v)
    return merge_heads_linear(ctx, p.wo, p.bo), logits


def mha_core(x: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head self-attention without the residual."""
    out, _ = _attend(x, x, p)
    return out


def mha_self(x: Tensor, p: AttentionParams) -> Tensor:
    """x + MSA(x): residual self-attention over the token axis."""
    return x + mha_core(x, p)


def cross_attention(
    q_tokens: Tensor, kv_tokens: Tensor, p: AttentionParams
) -> CrossAttentionResult:
    """Attend queries over key/value tokens; expose pre-softmax logits.

    No residual is applied here; callers own the residual wiring. The same
    operation realizes both directions of the dual-stream exchange (state
    querying observations, and observations querying state).
    """
    out, logits = _attend(q_tokens, kv_tokens, p)
    return CrossAttentionResult(out=out, logits=logits)


def ffn(x: Tensor, p: FeedForwardParams) -> Tensor:
    """Pre-norm residual feed-forward: x + W2 . GELU(W1 . LN(x))."""
    h = layer_norm(x, p.ln_gain, p.ln_bias)
    h = linear(h, p.w1, p.b1)
    h = gelu(h)
    h = linear(h, p.w2, p.b2)
    return x + h
