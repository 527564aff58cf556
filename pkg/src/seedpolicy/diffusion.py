"""Denoising-diffusion machinery for the action expert.

Implements the squared-cosine ("cap v2") beta schedule, the closed-form
forward noising, the epsilon-prediction training loss, and full-step
ancestral sampling with posterior variance. The schedule stores both the
continuous alpha-bar curve evaluated at s = 0..T and the discrete running
product of alphas; the two coincide only while the 0.999 beta cap is
inactive, so both are exposed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ContractError, Tensor

__all__ = [
    "DiffusionSchedule",
    "ActionChunk",
    "alpha_bar_curve",
    "build_schedule",
    "q_sample",
    "predict_x0",
    "ddpm_loss",
    "ddpm_sample",
    "ancestral_update",
]

BETA_CAP = 0.999
_COS_OFFSET = 0.008


@dataclass
class ActionChunk:
    """A predicted sequence of future actions (N x action_dim)."""

    actions: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclass
class DiffusionSchedule:
    """Per-timestep noise schedule arrays (float64).

    ``alpha_bars`` is the exact running product of ``alphas``;
    ``curve`` is the underlying cosine-squared alpha-bar function at
    s = 0..T (length T + 1).
    """

    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    curve: np.ndarray

    def validate(self) -> "DiffusionSchedule":
        if not ((self.betas > 0).all() and (self.betas <= BETA_CAP).all()):
            raise ContractError("betas must lie in (0, 0.999]")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ContractError("alpha_bars must be strictly decreasing")
        return self


def alpha_bar_curve(s: np.ndarray | float, steps: int) -> np.ndarray:
    """cos^2(((s/T + 0.008) / 1.008) * pi/2), the schedule's backbone."""
    frac = (np.asarray(s, dtype=np.float64) / steps + _COS_OFFSET) / (1.0 + _COS_OFFSET)
    return np.cos(frac * (np.pi / 2.0)) ** 2


def build_schedule(steps: int) -> DiffusionSchedule:
    """Squared-cosine schedule with per-step beta capped at 0.999."""
    if steps < 1:
        raise ContractError(f"schedule needs steps >= 1, got {steps}")
    curve = alpha_bar_curve(np.arange(steps + 1), steps)
    betas = np.minimum(1.0 - curve[1:] / curve[:-1], BETA_CAP)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(
        steps=steps, betas=betas, alphas=alphas, alpha_bars=alpha_bars, curve=curve
    ).validate()


def _check_t(t, steps: int) -> np.ndarray:
    t = np.asarray(t)
    if (t < 0).any() or (t >= steps).any():
        raise ContractError(f"timestep {t} outside [0, {steps})")
    return t


def _gather(coeff: np.ndarray, t: np.ndarray, target_ndim: int, dtype) -> np.ndarray:
    """Index a schedule array by (possibly batched) t, padded for broadcast."""
    c = coeff[t].astype(dtype)
    if c.ndim:
        c = c.reshape(c.shape + (1,) * (target_ndim - c.ndim))
    return c


def q_sample(x0: Tensor, t, eps: Tensor, sched: DiffusionSchedule) -> Tensor:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or an array indexing the leading axes of ``x0``.
    """
    t = _check_t(t, sched.steps)
    a = _gather(np.sqrt(sched.alpha_bars), t, x0.data.ndim, x0.dtype)
    b = _gather(np.sqrt(1.0 - sched.alpha_bars), t, x0.data.ndim, x0.dtype)
    return x0 * a + eps * b


def predict_x0(x_t: Tensor, eps_hat: Tensor, t, sched: DiffusionSchedule) -> Tensor:
    """Invert the eps parameterization: (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    t = _check_t(t, sched.steps)
    a = _gather(np.sqrt(sched.alpha_bars), t, x_t.data.ndim, x_t.dtype)
    b = _gather(np.sqrt(1.0 - sched.alpha_bars), t, x_t.data.ndim, x_t.dtype)
    return (x_t - eps_hat * b) * (1.0 / a)


def ddpm_loss(
    model: Callable[[Tensor, np.ndarray, object], Tensor],
    x0: Tensor,
    cond,
    rng: np.random.Generator,
    sched: DiffusionSchedule,
) -> Tensor:
    """Epsilon-prediction MSE on one noising draw per leading batch element.

    Draws t uniform over [0, T) and standard-normal noise, then returns
    ``mean((eps - model(q_sample(x0, t, eps), t, cond))^2)``.
    """
    lead = x0.shape[:-2]
    t = rng.integers(0, sched.steps, size=lead) if lead else int(rng.integers(0, sched.steps))
    eps = Tensor(rng.standard_normal(x0.shape).astype(x0.dtype))
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = model(x_t, t, cond)
    diff = eps - eps_hat
    return (diff * diff).mean()


def ancestral_update(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    sched: DiffusionSchedule,
    z: np.ndarray | None,
    clip_x0: float | None = None,
) -> np.ndarray:
    """One reverse step: posterior mean plus sigma_t * z (z omitted at t=0).

    With ``clip_x0`` set, the implied clean sample is clamped to
    [-clip_x0, clip_x0] and the noise estimate recomputed before the
    update; the final steps of the capped cosine schedule amplify noise
    estimation error by 1/sqrt(alpha_t) (over 30x at the last step), and
    the clamp keeps that error from compounding. With ``clip_x0=None``
    the update is exactly the textbook epsilon form.
    """
    beta = sched.betas[t]
    alpha = sched.alphas[t]
    abar = sched.alpha_bars[t]
    dtype = x_t.dtype
    if clip_x0 is not None:
        sa = np.sqrt(abar).astype(dtype)
        sb = np.sqrt(1.0 - abar).astype(dtype)
        x0_hat = np.clip((x_t - sb * eps_hat) / sa, -clip_x0, clip_x0)
        eps_hat = (x_t - sa * x0_hat) / sb
    mean = (x_t - (beta / np.sqrt(1.0 - abar)).astype(dtype) * eps_hat) / np.sqrt(alpha).astype(dtype)
    if t == 0 or z is None:
        return mean
    abar_prev = sched.alpha_bars[t - 1]
    sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar)).astype(dtype)
    return mean + sigma * z


def ddpm_sample(
    model: Callable,
    cond,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    shape: tuple[int, ...],
    inference_steps: int | None = None,
    dtype=np.float32,
    clip_x0: float | None = None,
) -> np.ndarray:
    """Full-step ancestral sampling from pure noise; pure function of the rng.

    Only ``inference_steps == T`` is supported; subsampled samplers are out
    of scope. Draw order is fixed: the initial noise first, then one z per
    reverse step down to t = 1.
    """
    if inference_steps is not None and inference_steps != sched.steps:
        raise ContractError(
            f"only full-step sampling supported: inference_steps must equal {sched.steps}"
        )
    x = rng.standard_normal(shape).astype(dtype)
    for t in range(sched.steps - 1, -1, -1):
        eps_hat = model(Tensor(x), t, cond)
        z = rng.standard_normal(shape).astype(dtype) if t > 0 else None
        x = ancestral_update(x, eps_hat.data, t, sched, z, clip_x0=clip_x0)
    return x
