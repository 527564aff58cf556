"""SPCK1 checkpoint container.

Layout: magic bytes ``SPCK1\\n``, a little-endian u64 header length, a
canonical UTF-8 JSON header, then raw little-endian float32 blobs in
manifest order. The header carries the merged run config (and its hash),
normalization statistics, optional training state (step counters and full
RNG states for bitwise resume), and the parameter manifest (path, shape,
dtype, byte offset). EMA parameters live under the ``ema/`` path prefix;
optimizer moments under ``opt.m/`` and ``opt.v/``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, canonical_json, run_config_from_dict

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

SPCK_MAGIC = b"SPCK1\n"


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    run_config: RunConfig
    header: dict
    arrays: dict[str, np.ndarray]  # raw params, ema/..., opt.m/..., opt.v/...

    def raw_params(self) -> dict[str, np.ndarray]:
        return {p: a for p, a in self.arrays.items() if "/" not in p}

    def ema_params(self) -> dict[str, np.ndarray]:
        return {p[len("ema/"):]: a for p, a in self.arrays.items() if p.startswith("ema/")}

    def opt_moments(self, which: str) -> dict[str, np.ndarray]:
        prefix = f"opt.{which}/"
        return {p[len(prefix):]: a for p, a in self.arrays.items() if p.startswith(prefix)}


def save_checkpoint(
    path: str,
    run_config: RunConfig,
    params: dict[str, np.ndarray],
    ema: dict[str, np.ndarray] | None = None,
    opt_m: dict[str, np.ndarray] | None = None,
    opt_v: dict[str, np.ndarray] | None = None,
    norm: dict | None = None,
    train_state: dict | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = dict(params)
    for prefix, group in (("ema/", ema), ("opt.m/", opt_m), ("opt.v/", opt_v)):
        if group:
            for p, a in group.items():
                arrays[f"{prefix}{p}"] = a

    blob = io.BytesIO()
    manifest = []
    for p in sorted(arrays):
        arr = np.ascontiguousarray(arrays[p], dtype="<f4")
        manifest.append(
            {"path": p, "shape": list(arrays[p].shape), "dtype": "float32", "offset": blob.tell()}
        )
        blob.write(arr.tobytes())

    header = {
        "schema": "SPCK1",
        "config": run_config.to_dict(),
        "config_hash": run_config.hash(),
        "norm": norm,
        "train_state": train_state,
        "manifest": manifest,
    }
    payload = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SPCK_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(blob.getvalue())


def load_checkpoint(path: str) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        magic = fh.read(len(SPCK_MAGIC))
        if magic != SPCK_MAGIC:
            raise CheckpointError(f"{path}: not an SPCK1 checkpoint (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        blob = fh.read()
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(blob[off:off + 4 * count], dtype="<f4").reshape(shape)
        arrays[entry["path"]] = arr
    return Checkpoint(
        run_config=run_config_from_dict(header["config"]),
        header=header,
        arrays=arrays,
    )
