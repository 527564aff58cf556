"""Finite-difference verification suite over every differentiable module.

Each check builds a tiny float64 model, moves its parameters to a generic
point (a fixed-seed perturbation, because some attention paths have
near-cancelling gradients at the tiny initialization scale, where the
relative-error metric is dominated by finite-difference roundoff), and
compares analytic gradients against central differences at step 1e-5.

``corrupt=True`` splices an identity operation with a deliberately wrong
vjp into one loss, as a negative control: the suite must then fail.
"""

from __future__ import annotations

import numpy as np

from .attention import cross_attention, ffn, init_attention_params, init_ffn_params, mha_self
from .config import ModelConfig
from .diffusion import build_schedule, q_sample
from .policy import build_policy, condition_tokens, eps_model
from .sega import reset
from .seeding import make_rng
from .tensor import ParamSet, Tensor, concat, gelu, grad_check, linear

__all__ = ["run_gradcheck", "GRADCHECK_MODULES", "DEFAULT_TOLERANCE"]

GRADCHECK_MODULES = ("attention", "sega", "diffusion", "policy")
DEFAULT_TOLERANCE = 1e-4
_STEP = 1e-5


def _corrupted_identity(x: Tensor) -> Tensor:
    """Identity with a wrong backward rule (negative-control hook)."""
    return Tensor._from_op(x.data, (x,), lambda g: (g * 1.01,))


def _genericize(params: ParamSet, seed: int = 987) -> None:
    for path, p in params.items():
        p.data = p.data + make_rng(seed, path).normal(0.0, 0.2, size=p.shape)


def _probe(rng_key: str, shape) -> Tensor:
    return Tensor(make_rng(11, rng_key).normal(size=shape))


def _check_attention(corrupt: bool) -> float:
    ps = ParamSet()
    ap = init_attention_params(ps, "attn", 8, 2, seed=3, dtype=np.float64)
    fp = init_ffn_params(ps, "ffn", 8, seed=3, dtype=np.float64)
    _genericize(ps)
    x = _probe("attn-x", (3, 8))
    kv = _probe("attn-kv", (4, 8))
    pr1, pr2, pr3 = _probe("p1", (3, 8)), _probe("p2", (3, 8)), _probe("p3", (3, 8))

    def loss(_):
        out = mha_self(x, ap)
        ca = cross_attention(x, kv, ap)
        ff = ffn(x, fp)
        lg = ca.logits.mean()
        s = (out * pr1).sum() + (ca.out * pr2).sum() + (ff * pr3).sum() + lg
        return _corrupted_identity(s) if corrupt else s

    return grad_check(loss, ps, _STEP)


def _tiny_config() -> ModelConfig:
    return ModelConfig(
        d_model=8, state_rows=2, depth=1, heads=2, t_obs=2, obs_dim=4, pose_dim=3,
        action_dim=2, pred_horizon=2, exec_horizon=1, t_diffusion=5,
        denoiser_depth=1, denoiser_heads=2,
    )


def _check_sega(corrupt: bool) -> float:
    cfg = _tiny_config()
    policy = build_policy(cfg, seed=5, dtype=np.float64)
    _genericize(policy.params)
    frames = _probe("sega-frames", (2, 4))
    pose = _probe("sega-pose", (3,))
    pr_s = _probe("sega-ps", (2, 8))
    pr_o = _probe("sega-po", (3, 8))
    sega_paths = ParamSet()
    for path, t in policy.params.items():
        if path.startswith("sega"):
            sega_paths._params[path] = t

    def loss(_):
        st = reset(None, policy.sega_params)
        tokens, st2, _ = condition_tokens(policy, frames, pose, st)
        s = (st2.s * pr_s).sum() + (tokens * pr_o).sum()
        return _corrupted_identity(s) if corrupt else s

    return grad_check(loss, sega_paths, _STEP)


def _check_diffusion(corrupt: bool) -> float:
    # epsilon loss through a small dense model, with the (t, eps) draw frozen
    sched = build_schedule(6)
    rng = make_rng(21, "diff")
    ps = ParamSet()
    w1 = ps.add("w1", Tensor(rng.normal(size=(4, 16)) / 2.0))
    b1 = ps.add("b1", Tensor(np.zeros(16)))
    w2 = ps.add("w2", Tensor(rng.normal(size=(16, 2)) / 4.0))
    b2 = ps.add("b2", Tensor(np.zeros(2)))
    x0 = _probe("diff-x0", (3, 2))
    eps = _probe("diff-eps", (3, 2))
    cond = _probe("diff-cond", (3, 2))
    t_fixed = 2

    def loss(_):
        x_t = q_sample(x0, t_fixed, eps, sched)
        h = concat([x_t, cond], axis=-1)
        eps_hat = linear(gelu(linear(h, w1, b1)), w2, b2)
        d = eps - eps_hat
        s = (d * d).mean()
        return _corrupted_identity(s) if corrupt else s

    return grad_check(loss, ps, _STEP)


def _check_policy(corrupt: bool) -> float:
    cfg = _tiny_config()
    policy = build_policy(cfg, seed=7, dtype=np.float64)
    _genericize(policy.params)
    frames = _probe("pol-frames", (2, 4))
    pose = _probe("pol-pose", (3,))
    x0 = _probe("pol-x0", (2, 2))
    eps = _probe("pol-eps", (2, 2))
    t_fixed = 3
    model = eps_model(policy)

    def loss(_):
        st = reset(None, policy.sega_params)
        tokens, st2, _ = condition_tokens(policy, frames, pose, st)
        x_t = q_sample(x0, t_fixed, eps, policy.schedule)
        eps_hat = model(x_t, t_fixed, tokens)
        d = eps - eps_hat
        s = (d * d).mean() + st2.s.square().mean()
        return _corrupted_identity(s) if corrupt else s

    return grad_check(loss, policy.params, _STEP)


_CHECKS = {
    "attention": _check_attention,
    "sega": _check_sega,
    "diffusion": _check_diffusion,
    "policy": _check_policy,
}


def run_gradcheck(corrupt: bool = False) -> dict[str, float]:
    """Max relative FD error per module; the full map is always returned."""
    return {name: _CHECKS[name](corrupt) for name in GRADCHECK_MODULES}
