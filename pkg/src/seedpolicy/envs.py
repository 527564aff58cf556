"""Synthetic 2-D manipulation tasks with deliberate perceptual aliasing.

Each environment is a deterministic state machine over a planar arm, a
binary gripper, and a few movable objects. The task script lives in a
hidden phase variable that observations never encode; the looping task
revisits an identical-looking scene configuration in different phases, so
fixed-window policies face a genuinely ambiguous decision while a
recurrent policy can count what already happened.

Tasks
-----
``looping_place_retrieval``
    Place the block in the tray, retrieve it back home, place it again,
    then retreat to the staging point. The place-approach windows of the
    first and second tray visits are bitwise identical (deterministic
    expert, same endpoints), but the correct continuations differ:
    re-grip after the first place, retreat after the second.

``sequential_picking``
    Move three blocks to a shared drop zone in fixed color order, then
    retreat to the staging point.

A scripted expert with privileged phase access generates demonstrations;
episodes then pass the motion-based static-frame filter and store actions
in next-state form (arm delta to the next kept frame plus the next
gripper setpoint).
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, canonical_json, config_hash
from .seeding import make_rng

__all__ = [
    "EnvError",
    "EnvState",
    "Episode",
    "DemoSet",
    "STAGING_POINT",
    "env_reset",
    "env_step",
    "observe",
    "expert_policy",
    "expert_step_bound",
    "gen_demos",
    "filter_static_frames",
    "build_targets",
    "save_demoset",
    "load_demoset",
]

SPDS_MAGIC = b"SPDS1\n"

# the arm's rest/staging location; episodes start and end here
STAGING_POINT = np.zeros(2)

GRIP_OPEN = 0
GRIP_CLOSED = 1


class EnvError(RuntimeError):
    """Environment misconfiguration (e.g. unplaceable layout, expert failure)."""


@dataclass
class EnvState:
    """Full mutable world state; ``phase`` is hidden from observations."""

    arm: np.ndarray
    gripper: int
    objects: np.ndarray  # (n_objects, 2) current positions
    homes: np.ndarray  # (n_objects, 2) spawn positions
    target: np.ndarray  # tray / drop zone position
    held_object: int | None
    phase: int
    step_count: int
    noise: np.ndarray
    rng: np.random.Generator
    done: bool = False
    success: bool = False


@dataclass
class Episode:
    """One demonstration: aligned observation/pose/action arrays."""

    observations: np.ndarray  # (T, obs_dim) float32
    poses: np.ndarray  # (T, pose_dim) float32
    actions: np.ndarray  # (T, action_dim) float32
    success: bool = True

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass
class DemoSet:
    manifest: dict
    episodes: list[Episode] = field(default_factory=list)


# ----------------------------------------------------------------------
# observation model


def observe(config: EnvConfig, state: EnvState) -> np.ndarray:
    """Observation: arm, gripper, positions, relative offsets, noise.

    Besides absolute positions the vector carries the object-to-arm and
    target-to-arm offsets (the relative geometry a camera view affords).
    A pure function of the visible fields; two states that differ only in
    ``phase`` (or ``step_count``) produce identical observations, and the
    trailing ``distractor_dims`` channels are the only stochastic ones.
    """
    parts = [state.arm, [float(state.gripper)], state.objects.reshape(-1), state.target,
             (state.objects - state.arm).reshape(-1), state.target - state.arm]
    if config.distractor_dims:
        parts.append(state.noise)
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def pose_of(state: EnvState) -> np.ndarray:
    return np.array([state.arm[0], state.arm[1], float(state.gripper)])


# ----------------------------------------------------------------------
# reset / step


def _draw_point(rng: np.random.Generator, config: EnvConfig, existing: list[np.ndarray]) -> np.ndarray:
    for _ in range(1000):
        p = rng.uniform(-config.object_range, config.object_range, size=2)
        if np.linalg.norm(p) < config.min_offset:
            continue  # keep clear of the staging point
        if any(np.linalg.norm(p - q) < config.min_separation for q in existing):
            continue
        return p
    raise EnvError("could not place objects; randomization ranges too tight")


def _canonical_layout(config: EnvConfig) -> tuple[list[np.ndarray], np.ndarray]:
    """Fixed layout used when position randomization is disabled."""
    n = config.n_objects
    radius = 0.6 * config.workspace_halfwidth
    homes = [
        radius * np.array([np.cos(2 * np.pi * i / (n + 1)), np.sin(2 * np.pi * i / (n + 1))])
        for i in range(n)
    ]
    target = radius * np.array([np.cos(2 * np.pi * n / (n + 1)), np.sin(2 * np.pi * n / (n + 1))])
    return homes, target


def env_reset(config: EnvConfig, seed: int) -> tuple[EnvState, np.ndarray]:
    """Seeded episode start: randomized layout, arm at the staging point."""
    config.validate()
    rng = make_rng(seed, "env-episode")
    if config.object_range == 0.0:
        homes, target = _canonical_layout(config)
    else:
        placed: list[np.ndarray] = []
        homes = []
        for _ in range(config.n_objects):
            p = _draw_point(rng, config, placed)
            placed.append(p)
            homes.append(p)
        target = _draw_point(rng, config, placed)
    n = config.distractor_dims
    noise = rng.uniform(-1.0, 1.0, size=n) if n else np.zeros(0)
    state = EnvState(
        arm=STAGING_POINT.copy(),
        gripper=GRIP_OPEN,
        objects=np.array(homes, dtype=np.float64),
        homes=np.array(homes, dtype=np.float64),
        target=np.asarray(target, dtype=np.float64),
        held_object=None,
        phase=0,
        step_count=0,
        noise=noise,
        rng=rng,
    )
    return state, observe(config, state)


def _final_phase(config: EnvConfig) -> int:
    # looping: grip, place, grip, retrieve, grip, place, retreat -> 7 phases
    # sequential: (grip, place) x 3, retreat -> 7 phases
    return 6


def _phase_advance(config: EnvConfig, state: EnvState,
                   picked: int | None, released: int | None) -> None:
    """Advance the hidden phase when the scripted subgoal completes.

    Phases are monotone; mechanically legal events that do not match the
    current subgoal leave the phase untouched.
    """
    tol = config.tol
    phase = state.phase
    if config.task == "looping_place_retrieval":
        home = state.homes[0]
        tray = state.target
        if phase == 0 and picked == 0:
            state.phase = 1
        elif phase == 1 and released == 0 and np.linalg.norm(state.objects[0] - tray) <= tol:
            state.phase = 2
        elif phase == 2 and picked == 0:
            state.phase = 3
        elif phase == 3 and released == 0 and np.linalg.norm(state.objects[0] - home) <= tol:
            state.phase = 4
        elif phase == 4 and picked == 0:
            state.phase = 5
        elif phase == 5 and released == 0 and np.linalg.norm(state.objects[0] - tray) <= tol:
            state.phase = 6
        elif phase == 6 and state.held_object is None \
                and np.linalg.norm(state.arm - STAGING_POINT) <= tol:
            state.success = True
    else:  # sequential_picking
        idx = phase // 2  # which block the script is working on
        if phase in (0, 2, 4) and picked == idx:
            state.phase = phase + 1
        elif phase in (1, 3, 5) and released == idx \
                and np.linalg.norm(state.objects[idx] - state.target) <= tol:
            state.phase = phase + 1
        elif phase == 6 and state.held_object is None \
                and np.linalg.norm(state.arm - STAGING_POINT) <= tol:
            state.success = True


def env_step(
    config: EnvConfig, state: EnvState, action: np.ndarray
) -> tuple[EnvState, np.ndarray, bool, bool]:
    """Apply one action: clamped arm delta plus a gripper setpoint.

    The gripper closes on the nearest free object within tolerance (if
    any) and releases a held object in place. The hidden phase advances
    per the task script; ``done`` on success or step budget exhaustion.
    """
    if state.done:
        return state, observe(config, state), True, state.success

    action = np.asarray(action, dtype=np.float64)
    delta = action[:2]
    norm = float(np.linalg.norm(delta))
    if norm > config.max_step_len:
        delta = delta * (config.max_step_len / norm)
    state.arm = np.clip(state.arm + delta,
                        -config.workspace_halfwidth, config.workspace_halfwidth)

    if state.held_object is not None:
        state.objects[state.held_object] = state.arm.copy()

    want_closed = action[2] > 0.5
    picked: int | None = None
    released: int | None = None
    if want_closed and state.gripper == GRIP_OPEN:
        state.gripper = GRIP_CLOSED
        free = [i for i in range(config.n_objects) if i != state.held_object]
        dists = [(np.linalg.norm(state.objects[i] - state.arm), i) for i in free]
        close = [(d, i) for d, i in dists if d <= config.tol]
        if close and state.held_object is None:
            picked = min(close)[1]
            state.held_object = picked
            state.objects[picked] = state.arm.copy()
    elif not want_closed and state.gripper == GRIP_CLOSED:
        state.gripper = GRIP_OPEN
        if state.held_object is not None:
            released = state.held_object
            state.held_object = None

    state.step_count += 1
    n = config.distractor_dims
    if n and state.step_count % config.distractor_resample_every == 0:
        state.noise = state.rng.uniform(-1.0, 1.0, size=n)

    _phase_advance(config, state, picked, released)
    if state.success or state.step_count >= config.max_steps:
        state.done = True
    return state, observe(config, state), state.done, state.success


# ----------------------------------------------------------------------
# scripted expert


def _expert_script(config: EnvConfig, state: EnvState) -> tuple[str, int, np.ndarray]:
    """Per-phase (mode, object index, destination) for the expert.

    Modes: "pick" (grab the object wherever it currently lies), "place"
    (carry it to the destination and release), "retreat" (return to the
    staging point empty-handed).
    """
    if config.task == "looping_place_retrieval":
        home, tray = state.homes[0], state.target
        script = [
            ("pick", 0, home),
            ("place", 0, tray),
            ("pick", 0, tray),
            ("place", 0, home),
            ("pick", 0, home),
            ("place", 0, tray),
            ("retreat", 0, STAGING_POINT),
        ]
    else:
        script = []
        for i in range(3):
            script.append(("pick", i, state.homes[i]))
            script.append(("place", i, state.target))
        script.append(("retreat", 0, STAGING_POINT))
    return script[min(state.phase, len(script) - 1)]


def _approach(config: EnvConfig, state: EnvState, target: np.ndarray,
              grip_at_arrival: int) -> np.ndarray:
    offset = target - state.arm
    dist = float(np.linalg.norm(offset))
    if dist > config.tol:
        step = offset if dist <= config.max_step_len else offset * (config.max_step_len / dist)
        return np.array([step[0], step[1], float(state.gripper)])
    return np.array([0.0, 0.0, float(grip_at_arrival)])


def expert_policy(config: EnvConfig, state: EnvState) -> np.ndarray:
    """Privileged waypoint controller: reads the hidden phase.

    Moves toward the current subgoal at capped speed and emits a pure
    gripper command on arrival. The controller is closed-loop robust: a
    missed grip is reopened and retried at the object's current position,
    and an object released off-target is fetched again. Demo collection
    perturbs the executed motion, so these recoveries appear in the data.
    """
    mode, obj_idx, dest = _expert_script(config, state)
    if mode == "retreat":
        return _approach(config, state, STAGING_POINT, GRIP_OPEN)
    holding = state.held_object == obj_idx
    if mode == "place" and holding:
        return _approach(config, state, dest, GRIP_OPEN)
    # pick behavior, also the recovery path for a dropped object
    if state.gripper == GRIP_CLOSED and state.held_object is None:
        return np.array([0.0, 0.0, float(GRIP_OPEN)])
    return _approach(config, state, state.objects[obj_idx], GRIP_CLOSED)


def expert_step_bound(config: EnvConfig, state: EnvState) -> int:
    """Geometric upper bound on the expert's episode length.

    Sum over scripted legs of ceil(distance / speed cap), plus one gripper
    step per phase and a small arrival slack per leg.
    """
    if config.task == "looping_place_retrieval":
        home, tray = state.homes[0], state.target
        legs = [
            (STAGING_POINT, home), (home, tray), (tray, tray),
            (tray, home), (home, home), (home, tray), (tray, STAGING_POINT),
        ]
    else:
        legs = []
        prev = STAGING_POINT
        for i in range(3):
            legs.append((prev, state.homes[i]))
            legs.append((state.homes[i], state.target))
            prev = state.target
        legs.append((prev, STAGING_POINT))
    total = 0
    for a, b in legs:
        total += int(np.ceil(np.linalg.norm(np.asarray(b) - np.asarray(a)) / config.max_step_len)) + 2
    return total


# ----------------------------------------------------------------------
# demonstration pipeline


def _rollout_expert(config: EnvConfig, seed: int) -> tuple[Episode, EnvState]:
    """Expert rollout with corrective-noise injection.

    The executed arm delta is the expert's command plus a seeded Gaussian
    perturbation; the expert replans from the perturbed state, so the
    recorded episode demonstrates corrections around the nominal path.
    """
    state, obs = env_reset(config, seed)
    noise_rng = make_rng(seed, "demo-noise")
    observations, poses = [obs], [pose_of(state)]
    done, success = False, False
    while not done:
        action = expert_policy(config, state)
        if config.demo_action_noise > 0:
            action = action + np.concatenate(
                [noise_rng.normal(0.0, config.demo_action_noise, size=2), [0.0]]
            )
        state, obs, done, success = env_step(config, state, action)
        observations.append(obs)
        poses.append(pose_of(state))
    ep = Episode(
        observations=np.asarray(observations, dtype=np.float32),
        poses=np.asarray(poses, dtype=np.float32),
        actions=_derive_actions(np.asarray(poses, dtype=np.float32)),
        success=success,
    )
    return ep, state


def _derive_actions(poses: np.ndarray) -> np.ndarray:
    """Next-state action targets: delta to the next pose + next gripper.

    The final frame gets a synthetic stay action (zero delta, hold grip).
    """
    t = poses.shape[0]
    actions = np.zeros((t, 3), dtype=np.float32)
    if t > 1:
        actions[:-1, :2] = poses[1:, :2] - poses[:-1, :2]
        actions[:-1, 2] = poses[1:, 2]
    actions[-1] = [0.0, 0.0, poses[-1, 2]]
    return actions


def filter_static_frames(episode: Episode, tol: float = 1e-4) -> Episode:
    """Drop frames whose pose barely moved since the last kept frame.

    Frame t is discarded when max|pose_t - pose_last_kept| < tol (arm and
    gripper channels). Actions are re-derived from the surviving poses so
    the next-state alignment is preserved.
    """
    if tol <= 0:
        raise EnvError("filter tolerance must be positive")
    poses = episode.poses
    keep = [0]
    for t in range(1, poses.shape[0]):
        if np.abs(poses[t] - poses[keep[-1]]).max() >= tol:
            keep.append(t)
    idx = np.asarray(keep)
    new_poses = episode.poses[idx]
    return Episode(
        observations=episode.observations[idx],
        poses=new_poses,
        actions=_derive_actions(new_poses),
        success=episode.success,
    )


def build_targets(episode: Episode, t_obs: int, horizon: int):
    """Supervised pairs: repeat-padded windows and next-action chunks.

    Yields one (frames, pose, chunk) triple per step t = 0..T-2; windows
    repeat the first frame before episode start and chunks repeat the
    final recorded action past episode end.
    """
    t_len = len(episode)
    if t_len < 2:
        raise EnvError("build_targets needs an episode of length >= 2")
    for t in range(t_len - 1):
        frame_idx = [max(0, t - t_obs + 1 + j) for j in range(t_obs)]
        chunk_idx = [min(t + j, t_len - 1) for j in range(horizon)]
        yield (
            episode.observations[frame_idx],
            episode.poses[t],
            episode.actions[chunk_idx],
        )


def gen_demos(config: EnvConfig, n: int, seed: int) -> DemoSet:
    """Seeded expert demonstrations with static frames filtered out.

    Episode i uses seed ``seed + i``; the (never expected) failure case
    re-rolls with a large seed shift and is counted in the manifest.
    Failure rate above 10% raises an environment misconfiguration error.
    """
    if n < 1:
        raise EnvError("gen_demos needs n >= 1")
    episodes: list[Episode] = []
    rerolls = 0
    for i in range(n):
        ep_seed = seed + i
        attempts = 0
        while True:
            ep, state = _rollout_expert(config, ep_seed)
            if ep.success:
                break
            rerolls += 1
            attempts += 1
            ep_seed = ep_seed + 1_000_003
            if rerolls > max(1, n // 10):
                raise EnvError("expert failure rate exceeded 10%: environment misconfigured")
        episodes.append(filter_static_frames(ep))
    cfg_dict = dataclasses.asdict(config)
    manifest = {
        "schema": "SPDS1",
        "task": config.task,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "n_episodes": n,
        "rerolls": rerolls,
        "obs_dim": config.obs_dim,
        "pose_dim": config.pose_dim,
        "action_dim": 3,
        "seed": seed,
        "lengths": [len(ep) for ep in episodes],
    }
    return DemoSet(manifest=manifest, episodes=episodes)


# ----------------------------------------------------------------------
# on-disk format: magic, length-prefixed JSON manifest, float32 blobs


def save_demoset(demos: DemoSet, path: str) -> None:
    """Write the SPDS1 container: per-episode obs/pose/action blobs."""
    blobs = io.BytesIO()
    offsets = []
    for ep in demos.episodes:
        offsets.append(blobs.tell())
        for arr in (ep.observations, ep.poses, ep.actions):
            blobs.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = dict(demos.manifest)
    manifest["episode_offsets"] = offsets
    manifest["episode_success"] = [bool(ep.success) for ep in demos.episodes]
    payload = canonical_json(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SPDS_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(blobs.getvalue())


def load_demoset(path: str) -> DemoSet:
    with open(path, "rb") as fh:
        magic = fh.read(len(SPDS_MAGIC))
        if magic != SPDS_MAGIC:
            raise EnvError(f"{path}: not an SPDS1 file (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        blob = fh.read()
    obs_dim = manifest["obs_dim"]
    pose_dim = manifest["pose_dim"]
    action_dim = manifest["action_dim"]
    episodes = []
    for i, (off, t_len) in enumerate(zip(manifest["episode_offsets"], manifest["lengths"])):
        cursor = off
        arrays = []
        for dim in (obs_dim, pose_dim, action_dim):
            nbytes = t_len * dim * 4
            arrays.append(
                np.frombuffer(blob[cursor:cursor + nbytes], dtype="<f4").reshape(t_len, dim)
            )
            cursor += nbytes
        episodes.append(
            Episode(
                observations=arrays[0],
                poses=arrays[1],
                actions=arrays[2],
                success=manifest["episode_success"][i],
            )
        )
    return DemoSet(manifest=manifest, episodes=episodes)
