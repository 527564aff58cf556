"""Configuration dataclasses, presets, and strict run-config loading.

A run config is a JSON document with three sections (``model``, ``train``,
``env``) that map onto :class:`ModelConfig`, :class:`TrainConfig` and
:class:`EnvConfig`. Unknown keys are rejected. Precedence when assembling
a run: CLI flag overrides > config file values > named preset.

Every output artifact records ``config_hash(...)`` of the merged config, so
results can always be traced back to the exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "EnvConfig",
    "RunConfig",
    "VARIANTS",
    "PRESETS",
    "ConfigError",
    "canonical_json",
    "config_hash",
    "load_run_config",
    "merge_dicts",
]

VARIANTS = ("seed_policy", "dp_baseline", "temporal_attention", "ffn_gate", "state_no_gate")

TASKS = ("looping_place_retrieval", "sequential_picking")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class ModelConfig:
    """Architecture knobs for the policy and its temporal module.

    ``state_rows`` is the number of latent-state rows, ``depth`` the number
    of stacked dual-stream blocks, ``t_obs`` the stacked observation steps;
    the encoder emits one token per frame plus one pose token, so the
    observation token count is always ``t_obs + 1``.
    """

    d_model: int = 256
    state_rows: int = 60
    depth: int = 6
    heads: int = 4
    t_obs: int = 3
    obs_dim: int = 9
    pose_dim: int = 3
    action_dim: int = 3
    pred_horizon: int = 8
    exec_horizon: int = 4
    t_diffusion: int = 100
    variant: str = "seed_policy"
    block_norm: bool = True
    fuse_per_block: bool = False
    denoiser_depth: int = 2
    denoiser_heads: int = 2
    gate_override: float | None = None

    @property
    def n_obs_tokens(self) -> int:
        return self.t_obs + 1

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def validate(self) -> "ModelConfig":
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.exec_horizon > self.pred_horizon:
            raise ConfigError("exec_horizon must be <= pred_horizon")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.t_diffusion < 1:
            raise ConfigError("t_diffusion must be >= 1")
        for name in ("d_model", "state_rows", "depth", "heads", "t_obs", "obs_dim",
                     "pose_dim", "action_dim", "pred_horizon", "exec_horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    @property
    def is_stateful(self) -> bool:
        return self.variant in ("seed_policy", "ffn_gate", "state_no_gate")

    @property
    def has_gate(self) -> bool:
        return self.variant in ("seed_policy", "ffn_gate")


@dataclass
class TrainConfig:
    """Optimization harness settings (AdamW, cosine LR, EMA)."""

    base_lr: float = 1e-4
    warmup_steps: int = 500
    total_epochs: int = 600
    batch_size: int = 128
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay_transformer: float = 1e-3
    weight_decay_encoder: float = 1e-6
    ema_decay: float = 0.75
    seed: int = 0
    max_unroll: int = 32
    diffusion_draws: int = 1  # noise draws per frame per step (amortizes the unroll)
    # "uniform" is the plain epsilon MSE; "min_snr" rebalances per-timestep
    # terms (min(1, gamma * (1-abar)/abar)) for faster convergence
    loss_weighting: str = "uniform"
    min_snr_gamma: float = 5.0
    checkpoint_every_epochs: int = 0  # 0: final checkpoint only
    log_every_steps: int = 1

    def validate(self) -> "TrainConfig":
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError("ema_decay must be in [0, 1)")
        if self.total_epochs < 1 or self.batch_size < 1 or self.max_unroll < 1:
            raise ConfigError("total_epochs, batch_size, max_unroll must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        return self


@dataclass
class EnvConfig:
    """Synthetic 2-D manipulation environment settings.

    Observations expose positions plus distractor noise channels but never
    the hidden task phase; that omission is the source of perceptual
    aliasing. ``tol`` is the success/interaction tolerance radius.
    """

    task: str = "looping_place_retrieval"
    workspace_halfwidth: float = 1.0
    object_range: float = 0.7
    min_offset: float = 0.35
    min_separation: float = 0.5
    distractor_dims: int = 2
    distractor_resample_every: int = 5
    max_steps: int = 160
    tol: float = 0.08
    max_step_len: float = 0.125
    # std of the arm-delta perturbation injected while collecting demos;
    # the expert corrects for it, so demonstrations cover a tube around
    # the nominal path (including grip retries) instead of exact lines
    demo_action_noise: float = 0.03
    seed: int = 0

    def validate(self) -> "EnvConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.tol <= 0 or self.max_steps <= 0:
            raise ConfigError("tol and max_steps must be positive")
        if self.max_step_len <= 0:
            raise ConfigError("max_step_len must be positive")
        if self.object_range + self.tol > self.workspace_halfwidth:
            raise ConfigError("object_range + tol must fit inside the workspace")
        return self

    @property
    def n_objects(self) -> int:
        return 1 if self.task == "looping_place_retrieval" else 3

    @property
    def obs_dim(self) -> int:
        # arm (2) + gripper (1) + object positions (2n) + target (2)
        # + object-to-arm offsets (2n) + target-to-arm offset (2) + noise
        return 3 + 4 * self.n_objects + 4 + self.distractor_dims

    @property
    def pose_dim(self) -> int:
        return 3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.env.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ----------------------------------------------------------------------
# presets

# Scaled-down settings that train in minutes on one CPU core.
_DESK_SMALL = {
    "model": {
        "d_model": 32,
        "state_rows": 8,
        "depth": 2,
        "heads": 2,
        "t_obs": 3,
        "action_dim": 3,
        "pred_horizon": 8,
        "exec_horizon": 4,
        "t_diffusion": 16,
        "denoiser_depth": 2,
        "denoiser_heads": 2,
    },
    "train": {
        "base_lr": 2e-3,
        "warmup_steps": 50,
        "total_epochs": 100,
        "batch_size": 4,
        "max_unroll": 64,
        "diffusion_draws": 8,
        "loss_weighting": "min_snr",
        "checkpoint_every_epochs": 0,
    },
    "env": {
        "object_range": 0.65,
        "min_offset": 0.3,
        "min_separation": 0.45,
        "max_step_len": 0.15,
        "demo_action_noise": 0.03,
        "max_steps": 96,
    },
}

# Full-scale hyperparameters as used for the real-robot training runs.
_PAPER_LIKE = {
    "model": {
        "d_model": 256,
        "state_rows": 60,
        "depth": 6,
        "heads": 4,
        "t_obs": 3,
        "t_diffusion": 100,
        "denoiser_depth": 4,
        "denoiser_heads": 4,
    },
    "train": {
        "base_lr": 1e-4,
        "warmup_steps": 500,
        "total_epochs": 600,
        "batch_size": 128,
        "max_unroll": 32,
    },
    "env": {},
}

PRESETS: dict[str, dict] = {
    "desk-small": _DESK_SMALL,
    "paper-like": _PAPER_LIKE,
}


# ----------------------------------------------------------------------
# strict loading / merging / hashing


def canonical_json(obj: Any) -> str:
    """Stable JSON encoding (sorted keys, no whitespace churn)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(d: dict) -> str:
    return hashlib.sha256(canonical_json(d).encode("utf-8")).hexdigest()[:16]


def merge_dicts(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_dicts(out[k], v)
        else:
            out[k] = v
    return out


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "env": EnvConfig,
}


def _build_section(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is TrainConfig and "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    sections = {
        name: _build_section(cls, data.get(name, {})) for name, cls in _SECTIONS.items()
    }
    return RunConfig(**sections).validate()


def load_run_config(
    path: str | None = None,
    preset: str | None = "desk-small",
    overrides: dict | None = None,
) -> RunConfig:
    """Assemble a validated RunConfig from preset, file, and overrides."""
    merged: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = merge_dicts(merged, PRESETS[preset])
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                file_data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON in {path}: {e}") from e
        if not isinstance(file_data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        merged = merge_dicts(merged, file_data)
    if overrides:
        merged = merge_dicts(merged, overrides)
    return run_config_from_dict(merged)
