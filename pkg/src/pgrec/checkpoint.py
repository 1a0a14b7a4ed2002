"""Versioned on-disk container for trained parameters and optimizer state.

The file is an ``.npz`` archive.  Tensors live under ``w/``, ``bn/``,
``adam_m/`` and ``adam_v/``; a JSON ``meta`` entry carries the format
version, config hash, run seed, dimensions, self-loop weights, Adam scalars
and a SHA-256 over every tensor so silent corruption is detected on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Dimensions, ModelParams
from .numerics import AdamState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParams
    config_hash: str
    seed: int
    adam: AdamState | None = None


def _digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: ModelParams, *, config_hash: str, seed: int, adam: AdamState | None = None):
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"bn/{k}": v for k, v in params.bn_stats.items()})
    if adam is not None:
        arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    meta = {
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "seed": int(seed),
        "dims": {"rank": params.dims.rank, "embed": params.dims.embed, "hidden": list(params.dims.hidden)},
        "betas": {k: float(v) for k, v in params.betas.items()},
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step,
        },
        "sha256": _digest(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from None
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('version')} != {FORMAT_VERSION}")
    if _digest(arrays) != meta.get("sha256"):
        raise CheckpointError(f"{path}: tensor checksum mismatch")
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise CheckpointError(
            f"{path}: checkpoint was trained with config {meta['config_hash'][:12]}, "
            f"current config is {expected_hash[:12]}"
        )

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    d = meta["dims"]
    params = ModelParams(Dimensions(d["rank"], d["embed"], tuple(d["hidden"])), group("w/"), group("bn/"),
                         meta["betas"])
    adam = None
    if meta["adam"] is not None:
        adam = AdamState(**meta["adam"], m=group("adam_m/"), v=group("adam_v/"))
    return Checkpoint(params, meta["config_hash"], meta["seed"], adam)
