"""Diffusion machinery: schedule oracle, noising identities, sampling."""

import numpy as np
import pytest

from seedpolicy.config import TrainConfig
from seedpolicy.diffusion import (
    ActionChunk,
    alpha_bar_curve,
    ancestral_update,
    build_schedule,
    ddpm_loss,
    ddpm_sample,
    predict_x0,
    q_sample,
)
from seedpolicy.tensor import ContractError, ParamSet, Tensor, backward, concat, gelu, grad_check, linear
from seedpolicy.training import OptimizerState, adamw_step


# ----------------------------------------------------------------------
# schedule


def test_schedule_degenerate_t1():
    sched = build_schedule(1)
    f0 = alpha_bar_curve(0.0, 1)
    f1 = alpha_bar_curve(1.0, 1)
    assert sched.betas[0] == min(1.0 - f1 / f0, 0.999)
    assert sched.betas[0] == 0.999  # cos^2(pi/2) = 0 makes the cap bind


def test_schedule_curve_start_value():
    sched = build_schedule(100)
    assert abs(sched.curve[0] - 0.9998446) < 1e-7


def test_schedule_shape_and_cap():
    sched = build_schedule(100)
    assert sched.alpha_bars[99] < sched.alpha_bars[0]
    assert (np.diff(sched.alpha_bars) < 0).all()
    assert (sched.betas > 0).all() and (sched.betas <= 0.999).all()


def test_schedule_matches_high_precision_oracle():
    # independent high-precision evaluation of the cosine curve
    import mpmath as mp

    mp.mp.dps = 50
    sched = build_schedule(100)
    for s in range(101):
        frac = (mp.mpf(s) / 100 + mp.mpf("0.008")) / mp.mpf("1.008")
        want = mp.cos(frac * mp.pi / 2) ** 2
        assert abs(sched.curve[s] - float(want)) < 1e-12
    # betas derived from the curve, with the cap
    for t in range(100):
        want_beta = min(1.0 - sched.curve[t + 1] / sched.curve[t], 0.999)
        assert abs(sched.betas[t] - want_beta) < 1e-15


def test_schedule_cumprod_invariant():
    sched = build_schedule(100)
    prod = 1.0
    for t in range(100):
        prod *= sched.alphas[t]
        assert abs(sched.alpha_bars[t] - prod) < 1e-12


def test_schedule_rejects_bad_steps():
    with pytest.raises(ContractError):
        build_schedule(0)


# ----------------------------------------------------------------------
# q_sample / predict_x0


def test_q_sample_zero_noise():
    sched = build_schedule(100)
    x0 = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    out = q_sample(x0, 50, Tensor(np.zeros((4, 3))), sched)
    assert np.abs(out.data - np.sqrt(sched.alpha_bars[50]) * x0.data).max() == 0.0


def test_q_sample_early_step_fidelity():
    sched = build_schedule(100)
    rng = np.random.default_rng(1)
    x0 = Tensor(rng.normal(size=(4, 3)))
    eps = Tensor(rng.normal(size=(4, 3)))
    out = q_sample(x0, 0, eps, sched)
    bound = np.sqrt(1.0 - sched.alpha_bars[0]) * np.abs(eps.data).max() + 1e-12
    assert np.abs(out.data - x0.data).max() <= bound + np.abs(x0.data).max() * 1e-4


def test_q_sample_closed_form():
    sched = build_schedule(100)
    rng = np.random.default_rng(2)
    x0, eps = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    got = q_sample(Tensor(x0), 50, Tensor(eps), sched).data
    want = np.sqrt(sched.alpha_bars[50]) * x0 + np.sqrt(1 - sched.alpha_bars[50]) * eps
    assert np.abs(got - want).max() < 1e-12


def test_q_sample_rejects_bad_t():
    sched = build_schedule(10)
    x = Tensor(np.zeros((1, 1)))
    with pytest.raises(ContractError):
        q_sample(x, 10, x, sched)
    with pytest.raises(ContractError):
        q_sample(x, -1, x, sched)


def test_predict_x0_inverts_q_sample():
    sched = build_schedule(100)
    rng = np.random.default_rng(3)
    x0, eps = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for t in (0, 17, 50, 99):
        x_t = q_sample(Tensor(x0), t, Tensor(eps), sched)
        back = predict_x0(x_t, Tensor(eps), t, sched)
        assert np.abs(back.data - x0).max() < 1e-10


def test_predict_x0_zero_eps():
    sched = build_schedule(100)
    x_t = Tensor(np.random.default_rng(4).normal(size=(2, 3)))
    out = predict_x0(x_t, Tensor(np.zeros((2, 3))), 30, sched)
    assert np.abs(out.data - x_t.data / np.sqrt(sched.alpha_bars[30])).max() < 1e-12


def test_predict_x0_rearrangement_oracle():
    sched = build_schedule(100)
    rng = np.random.default_rng(5)
    x_t, eps_hat = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    t = 42
    want = (x_t - np.sqrt(1 - sched.alpha_bars[t]) * eps_hat) / np.sqrt(sched.alpha_bars[t])
    got = predict_x0(Tensor(x_t), Tensor(eps_hat), t, sched).data
    assert np.abs(got - want).max() < 1e-12


# ----------------------------------------------------------------------
# ddpm_loss


def test_ddpm_loss_oracle_leak_model_zero_loss():
    sched = build_schedule(20)
    x0 = Tensor(np.random.default_rng(6).normal(size=(4, 2, 3)).astype(np.float32))

    def oracle(x_t, t, cond):
        # recover the injected noise algebraically from the known x0
        t = np.asarray(t)
        a = np.sqrt(sched.alpha_bars[t]).astype(np.float32).reshape(-1, 1, 1)
        b = np.sqrt(1 - sched.alpha_bars[t]).astype(np.float32).reshape(-1, 1, 1)
        return (x_t - x0 * a) * Tensor(1.0 / b)

    loss = ddpm_loss(oracle, x0, None, np.random.default_rng(0), sched)
    assert loss.item() < 1e-10


def test_ddpm_loss_zero_model_expectation_one():
    sched = build_schedule(20)
    x0 = Tensor(np.zeros((2, 3), dtype=np.float32))
    zero_model = lambda x_t, t, cond: Tensor(np.zeros_like(x_t.data))
    rng = np.random.default_rng(1)
    losses = [ddpm_loss(zero_model, x0, None, rng, sched).item() for _ in range(1000)]
    assert abs(np.mean(losses) - 1.0) < 0.1


def test_ddpm_loss_differentiable():
    sched = build_schedule(8)
    rng = np.random.default_rng(7)
    ps = ParamSet()
    w = ps.add("w", Tensor(rng.normal(size=(3, 3)), dtype=np.float64))
    b = ps.add("b", Tensor(np.zeros(3), dtype=np.float64))
    x0 = Tensor(rng.normal(size=(2, 3)))
    eps = Tensor(rng.normal(size=(2, 3)))
    t_fixed = 4

    def f(_):
        x_t = q_sample(x0, t_fixed, eps, sched)
        eps_hat = linear(x_t, w, b)
        d = eps - eps_hat
        return (d * d).mean()

    assert grad_check(f, ps, 1e-5) < 1e-5


# ----------------------------------------------------------------------
# ddpm_sample


def test_ddpm_sample_seeded_determinism():
    sched = build_schedule(10)
    model = lambda x_t, t, cond: Tensor(x_t.data * 0.9)
    a = ddpm_sample(model, None, sched, np.random.default_rng(42), shape=(2, 3))
    b = ddpm_sample(model, None, sched, np.random.default_rng(42), shape=(2, 3))
    assert np.array_equal(a, b)


def test_ddpm_sample_rejects_subsampling():
    sched = build_schedule(10)
    with pytest.raises(ContractError):
        ddpm_sample(lambda *a: None, None, sched, np.random.default_rng(0),
                    shape=(1,), inference_steps=5)


def test_ddpm_sample_single_step_oracle_recovers_x0():
    sched = build_schedule(1)
    x0 = np.array([[0.3, -0.7]], dtype=np.float64)

    def oracle(x_t, t, cond):
        a = np.sqrt(sched.alpha_bars[t])
        b = np.sqrt(1 - sched.alpha_bars[t])
        return Tensor((x_t.data - a * x0) / b)

    out = ddpm_sample(oracle, None, sched, np.random.default_rng(3), shape=(1, 2),
                      dtype=np.float64)
    assert np.abs(out - x0).max() < 1e-12  # sigma_0 = 0: exact inversion


def test_ddpm_sample_point_mass_end_to_end():
    """Train a small eps model on a constant target; samples concentrate."""
    rng = np.random.default_rng(0)
    c = np.array([[0.7, -0.3]], dtype=np.float32)
    sched = build_schedule(16)
    ps = ParamSet()
    d = 32
    w1 = ps.add("w1", Tensor((rng.standard_normal((2 + 8, d)) / np.sqrt(10)).astype(np.float32)))
    b1 = ps.add("b1", Tensor(np.zeros(d, dtype=np.float32)))
    w2 = ps.add("w2", Tensor((rng.standard_normal((d, 2)) / np.sqrt(d)).astype(np.float32)))
    b2 = ps.add("b2", Tensor(np.zeros(2, dtype=np.float32)))

    def temb(t, like):
        freqs = np.exp(-np.log(100.0) * np.arange(4) / 4)
        ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
        e = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)
        e = e.reshape(e.shape[:-1] + (1,) * (like.ndim - e.ndim) + (8,))
        return np.ascontiguousarray(np.broadcast_to(e, like.shape[:-1] + (8,)))

    def model(x_t, t, cond):
        h = concat([x_t, Tensor(temb(t, x_t.data))], axis=-1)
        return linear(gelu(linear(h, ps["w1"], ps["b1"])), ps["w2"], ps["b2"])

    tc = TrainConfig(base_lr=3e-3)
    opt = OptimizerState.fresh(ps)
    lrng = np.random.default_rng(1)
    x0 = Tensor(np.repeat(c[None], 64, axis=0))
    for _ in range(500):
        loss = ddpm_loss(model, x0, None, lrng, sched)
        backward(loss, ps)
        adamw_step(ps, {p: t.grad for p, t in ps.items()}, opt, 3e-3, tc)
    samples = np.array([
        ddpm_sample(model, None, sched, np.random.default_rng(100 + i), shape=(1, 2))
        for i in range(100)
    ])
    assert np.abs(samples.mean(axis=0) - c).max() < 0.1


def test_ancestral_update_unclipped_matches_textbook_formula():
    sched = build_schedule(12)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3))
    eh = rng.normal(size=(2, 3))
    z = rng.normal(size=(2, 3))
    for t in (11, 5, 1):
        got = ancestral_update(x, eh, t, sched, z, clip_x0=None)
        beta, alpha, abar = sched.betas[t], sched.alphas[t], sched.alpha_bars[t]
        mean = (x - beta / np.sqrt(1 - abar) * eh) / np.sqrt(alpha)
        sigma = np.sqrt(beta * (1 - sched.alpha_bars[t - 1]) / (1 - abar))
        assert np.abs(got - (mean + sigma * z)).max() < 1e-14
    got0 = ancestral_update(x, eh, 0, sched, z)
    mean0 = (x - sched.betas[0] / np.sqrt(1 - sched.alpha_bars[0]) * eh) / np.sqrt(sched.alphas[0])
    assert np.array_equal(got0, mean0)  # z ignored at the final step


def test_ancestral_update_clip_bounds_implied_x0():
    sched = build_schedule(12)
    x = np.full((1, 2), 10.0)
    eh = np.zeros((1, 2))
    t = 6
    out = ancestral_update(x, eh, t, sched, None, clip_x0=1.0)
    # with x0 clamped to 1, the update equals the posterior mean at x0=1
    sa, sb = np.sqrt(sched.alpha_bars[t]), np.sqrt(1 - sched.alpha_bars[t])
    eps_implied = (x - sa * 1.0) / sb
    want = (x - sched.betas[t] / sb * eps_implied) / np.sqrt(sched.alphas[t])
    assert np.abs(out - want).max() < 1e-12


def test_action_chunk_wrapper():
    chunk = ActionChunk(actions=np.zeros((8, 3)))
    assert chunk.horizon == 8
