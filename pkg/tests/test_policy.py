"""Policy assembly: encoder, variants, conditioning, denoiser, sampling."""

import dataclasses

import numpy as np
import pytest

from seedpolicy.config import ModelConfig
from seedpolicy.policy import (
    NormStats,
    ObservationWindow,
    build_policy,
    condition_tokens,
    conditioning_project,
    denoiser,
    encode_obs,
    eps_model,
    forward_action,
    sinusoid_embed,
    temporal_forward,
)
from seedpolicy.sega import reset
from seedpolicy.seeding import make_rng
from seedpolicy.tensor import ContractError, ParamSet, Tensor, backward, grad_check


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        d_model=8, state_rows=2, depth=1, heads=2, t_obs=2, obs_dim=4, pose_dim=3,
        action_dim=2, pred_horizon=2, exec_horizon=1, t_diffusion=4,
        denoiser_depth=1, denoiser_heads=2,
    )
    base.update(kw)
    return ModelConfig(**base)


# ----------------------------------------------------------------------
# encoder


def test_encode_zero_window_zero_biases():
    pol = build_policy(tiny_config(), seed=0, dtype=np.float64)
    frames = Tensor(np.zeros((2, 4)))
    pose = Tensor(np.zeros(3))
    out = encode_obs(frames, pose, pol.encoder)
    assert np.abs(out.data).max() == 0.0  # GELU(0)=0 and zero biases


def test_encode_identical_frames_share_weights():
    pol = build_policy(tiny_config(), seed=1, dtype=np.float64)
    f = np.random.default_rng(0).normal(size=4)
    frames = Tensor(np.stack([f, f]))
    pose = Tensor(np.random.default_rng(1).normal(size=3))
    out = encode_obs(frames, pose, pol.encoder).data
    assert np.array_equal(out[0], out[1])
    assert out.shape == (3, 8)  # t_obs frame tokens + one pose token


def test_encode_matches_per_token_mlp():
    pol = build_policy(tiny_config(), seed=2, dtype=np.float64)
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(2, 4))
    pose = rng.normal(size=3)
    enc = pol.encoder

    def mlp(x, w1, b1, w2, b2):
        h = x @ w1 + b1
        c = 0.7978845608028654
        h = 0.5 * h * (1 + np.tanh(c * (h + 0.044715 * h**3)))
        return h @ w2 + b2

    want = np.stack([
        mlp(frames[0], enc.frame_w1.data, enc.frame_b1.data, enc.frame_w2.data, enc.frame_b2.data),
        mlp(frames[1], enc.frame_w1.data, enc.frame_b1.data, enc.frame_w2.data, enc.frame_b2.data),
        mlp(pose, enc.pose_w1.data, enc.pose_b1.data, enc.pose_w2.data, enc.pose_b2.data),
    ])
    got = encode_obs(Tensor(frames), Tensor(pose), enc).data
    assert np.abs(got - want).max() < 1e-10


# ----------------------------------------------------------------------
# conditioning / denoiser


def test_conditioning_pool_of_identical_tokens():
    pol = build_policy(tiny_config(), seed=3, dtype=np.float64)
    tok = np.random.default_rng(4).normal(size=8)
    tokens = Tensor(np.stack([tok, tok, tok]))
    got = conditioning_project(tokens, 0, pol.denoiser_params).data
    emb = sinusoid_embed(0, 8, dtype=np.float64)
    want = np.concatenate([tok, emb]) @ pol.denoiser_params.cond_w.data + pol.denoiser_params.cond_b.data
    assert np.abs(got - want).max() < 1e-10


def test_timestep_embedding_deterministic_constant():
    a = sinusoid_embed(0, 8)
    b = sinusoid_embed(0, 8)
    assert np.array_equal(a, b)
    assert np.array_equal(a[:4], np.zeros(4))  # sin(0) = 0
    assert np.array_equal(a[4:], np.ones(4))  # cos(0) = 1


def test_conditioning_matches_hand_pooling():
    pol = build_policy(tiny_config(), seed=5, dtype=np.float64)
    tokens = np.random.default_rng(6).normal(size=(3, 8))
    t = 2
    pooled = tokens.mean(axis=0)
    emb = sinusoid_embed(t, 8, dtype=np.float64)
    want = np.concatenate([pooled, emb]) @ pol.denoiser_params.cond_w.data + pol.denoiser_params.cond_b.data
    got = conditioning_project(Tensor(tokens), t, pol.denoiser_params).data
    assert np.abs(got - want).max() < 1e-12


def test_denoiser_zero_final_projection():
    pol = build_policy(tiny_config(), seed=7, dtype=np.float64)
    pol.denoiser_params.out_w.data = np.zeros_like(pol.denoiser_params.out_w.data)
    x = Tensor(np.random.default_rng(8).normal(size=(2, 2)))
    cond = Tensor(np.random.default_rng(9).normal(size=8))
    out = denoiser(x, 1, cond, pol.denoiser_params)
    assert np.abs(out.data).max() == 0.0


def test_denoiser_pure_function():
    pol = build_policy(tiny_config(), seed=10, dtype=np.float64)
    x = Tensor(np.random.default_rng(11).normal(size=(2, 2)))
    cond = Tensor(np.random.default_rng(12).normal(size=8))
    a = denoiser(x, 3, cond, pol.denoiser_params).data
    b = denoiser(x, 3, cond, pol.denoiser_params).data
    assert np.array_equal(a, b)


def test_denoiser_grad_check():
    cfg = tiny_config()
    pol = build_policy(cfg, seed=13, dtype=np.float64)
    for path, p in pol.params.items():
        p.data = p.data + make_rng(77, path).normal(0, 0.2, p.shape)
    x = Tensor(np.random.default_rng(14).normal(size=(2, 2)))
    tokens = Tensor(np.random.default_rng(15).normal(size=(3, 8)))
    probe = Tensor(np.random.default_rng(16).normal(size=(2, 2)))
    den_params = ParamSet()
    for path, p in pol.params.items():
        if path.startswith(("denoiser", "condproj")):
            den_params._params[path] = p
    model = eps_model(pol)
    err = grad_check(lambda _: (model(x, 1, tokens) * probe).sum(), den_params, 1e-5)
    assert err < 1e-4


# ----------------------------------------------------------------------
# variants


def test_variant_parameter_sets():
    cfg = tiny_config()
    by_variant = {}
    for variant in ("seed_policy", "dp_baseline", "temporal_attention", "ffn_gate", "state_no_gate"):
        pol = build_policy(dataclasses.replace(cfg, variant=variant), seed=0)
        by_variant[variant] = set(pol.params.paths())
    assert any(p.startswith("sega.") for p in by_variant["seed_policy"])
    assert not any(p.startswith(("sega.", "temporal.")) for p in by_variant["dp_baseline"])
    assert any(p.startswith("temporal.") for p in by_variant["temporal_attention"])
    assert "sega.gate.w1" in by_variant["ffn_gate"]
    assert "sega.gate.w1" not in by_variant["seed_policy"]
    assert by_variant["state_no_gate"] == by_variant["seed_policy"]


def test_variant_parity_seed_vs_ffn_gate_with_clamped_gates():
    """With gates forced to 1 and shared weights, the two gated variants
    produce bitwise identical states."""
    cfg_a = tiny_config(variant="seed_policy", gate_override=1.0)
    cfg_b = tiny_config(variant="ffn_gate", gate_override=1.0)
    pa = build_policy(cfg_a, seed=4, dtype=np.float64)
    pb = build_policy(cfg_b, seed=4, dtype=np.float64)
    for path, t in pa.params.items():
        pb.params[path].data = t.data  # shared submodules get identical weights
    frames = Tensor(np.random.default_rng(17).normal(size=(2, 4)))
    pose = Tensor(np.random.default_rng(18).normal(size=3))
    sa, _, _ = condition_tokens(pa, frames, pose, reset(None, pa.sega_params))[1:], None, None
    out_a = condition_tokens(pa, frames, pose, reset(None, pa.sega_params))
    out_b = condition_tokens(pb, frames, pose, reset(None, pb.sega_params))
    assert np.array_equal(out_a[1].s.data, out_b[1].s.data)
    assert np.array_equal(out_a[0].data, out_b[0].data)


def test_dp_baseline_is_stateless_pure_function():
    cfg = tiny_config(variant="dp_baseline")
    pol = build_policy(cfg, seed=5)
    w = ObservationWindow(frames=np.random.default_rng(19).normal(size=(2, 4)),
                          pose=np.random.default_rng(20).normal(size=3))
    a1, tr1 = forward_action(pol, w, np.random.default_rng(0))
    # feed unrelated history, then the same window again
    other = ObservationWindow(frames=np.ones((2, 4)), pose=np.zeros(3))
    forward_action(pol, other, np.random.default_rng(1))
    a2, tr2 = forward_action(pol, w, np.random.default_rng(0))
    assert np.array_equal(a1.actions, a2.actions)
    assert tr1 is None and tr2 is None


def test_stateful_variant_requires_reset():
    pol = build_policy(tiny_config(variant="seed_policy"), seed=6)
    w = ObservationWindow(frames=np.zeros((2, 4)), pose=np.zeros(3))
    with pytest.raises(ContractError):
        forward_action(pol, w, np.random.default_rng(0))
    pol.reset_state()
    forward_action(pol, w, np.random.default_rng(0))


def test_seed_policy_deterministic_chunks():
    pol = build_policy(tiny_config(), seed=7)
    w = ObservationWindow(frames=np.random.default_rng(21).normal(size=(2, 4)),
                          pose=np.zeros(3))
    pol.reset_state()
    a1, _ = forward_action(pol, w, np.random.default_rng(5))
    pol.reset_state()
    a2, _ = forward_action(pol, w, np.random.default_rng(5))
    assert np.array_equal(a1.actions, a2.actions)


def test_state_evolves_on_nonconstant_stream():
    pol = build_policy(tiny_config(), seed=8)
    rng = np.random.default_rng(22)
    pol.reset_state()
    w1 = ObservationWindow(frames=rng.normal(size=(2, 4)), pose=rng.normal(size=3))
    forward_action(pol, w1, np.random.default_rng(0))
    s1 = pol.state.s.data.copy()
    w2 = ObservationWindow(frames=rng.normal(size=(2, 4)), pose=rng.normal(size=3))
    forward_action(pol, w2, np.random.default_rng(0))
    s2 = pol.state.s.data.copy()
    assert np.linalg.norm(s2 - s1) > 0
    assert pol.state.episode_step == 2


def test_temporal_attention_variant_runs():
    cfg = tiny_config(variant="temporal_attention")
    pol = build_policy(cfg, seed=9)
    tokens = Tensor(np.random.default_rng(23).normal(size=(3, 8)).astype(np.float32))
    out = temporal_forward(tokens, pol.temporal)
    assert out.shape == (3, 8)
    w = ObservationWindow(frames=np.zeros((2, 4)), pose=np.zeros(3))
    chunk, trace = forward_action(pol, w, np.random.default_rng(0))
    assert chunk.actions.shape == (2, 2) and trace is None


# ----------------------------------------------------------------------
# gradient flow per variant


def test_s0_gradient_flows_for_seed_policy_only():
    from seedpolicy.diffusion import q_sample

    cfg = tiny_config()
    pol = build_policy(cfg, seed=10, dtype=np.float64)
    frames = Tensor(np.random.default_rng(24).normal(size=(2, 4)))
    pose = Tensor(np.random.default_rng(25).normal(size=3))
    x0 = Tensor(np.random.default_rng(26).normal(size=(2, 2)))
    eps = Tensor(np.random.default_rng(27).normal(size=(2, 2)))
    tokens, st2, _ = condition_tokens(pol, frames, pose, reset(None, pol.sega_params))
    x_t = q_sample(x0, 2, eps, pol.schedule)
    eps_hat = eps_model(pol)(x_t, 2, tokens)
    d = eps - eps_hat
    grads = backward((d * d).mean(), pol.params)
    assert np.abs(grads["sega.s0"].data).max() > 0

    dp = build_policy(tiny_config(variant="dp_baseline"), seed=10, dtype=np.float64)
    assert "sega.s0" not in dp.params


def test_forward_action_denormalizes(tmp_path):
    cfg = tiny_config(variant="dp_baseline")
    norm = NormStats.identity(4, 3, 2)
    norm.action_mean = np.array([10.0, -10.0], dtype=np.float32)
    norm.action_std = np.array([0.1, 0.1], dtype=np.float32)
    pol = build_policy(cfg, seed=11, norm=norm)
    w = ObservationWindow(frames=np.zeros((2, 4)), pose=np.zeros(3))
    chunk, _ = forward_action(pol, w, np.random.default_rng(0))
    # normalized samples are clamped near [-1, 1]; raw actions land near means
    assert abs(chunk.actions[0, 0] - 10.0) < 1.0
    assert abs(chunk.actions[0, 1] + 10.0) < 1.0


def test_norm_stats_roundtrip():
    n = NormStats.identity(4, 3, 2)
    n2 = NormStats.from_dict(n.to_dict())
    assert np.array_equal(n.obs_mean, n2.obs_mean)
    assert np.array_equal(n.action_std, n2.action_std)
