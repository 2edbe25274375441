"""Checkpoint files: JSON text holding parameters, Adam state and run identity.

Layout::

    {"format": "reachtrain-checkpoint", "version": 1,
     "epoch": int, "config_hash": str, "seed": int,
     "params": {name: {"shape": [...], "data": [...]}},
     "adam": {"lr", "beta1", "beta2", "eps", "t", "m": {...}, "v": {...}},
     "checksum": sha256 of the canonical JSON of every other key}

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

FORMAT = "reachtrain-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack(arrays: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in sorted(arrays.items())}


def _unpack(d: dict) -> dict:
    out = {}
    for k, rec in d.items():
        a = np.asarray(rec["data"], dtype=np.float64)
        out[k] = a.reshape(rec["shape"])
    return out


def _digest(body: dict) -> str:
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def encode(params: dict, adam=None, epoch: int = 0, config_hash: str = "", seed: int = 0) -> str:
    body = {
        "format": FORMAT,
        "version": VERSION,
        "epoch": int(epoch),
        "config_hash": config_hash,
        "seed": int(seed),
        "params": _pack(params),
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t,
            "m": _pack(adam.m), "v": _pack(adam.v),
        },
    }
    body["checksum"] = _digest(body)
    return json.dumps(body, sort_keys=True)


def decode(text: str) -> dict:
    """Parsed checkpoint with ``params`` (and ``adam`` moments) as arrays."""
    try:
        body = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"not a checkpoint: {e}") from None
    if not isinstance(body, dict) or body.get("format") != FORMAT:
        raise CheckpointError("not a checkpoint: missing format tag")
    if body.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {body.get('version')!r}")
    stored = body.pop("checksum", None)
    if stored != _digest(body):
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or was edited")
    body["params"] = _unpack(body["params"])
    if body["adam"] is not None:
        body["adam"]["m"] = _unpack(body["adam"]["m"])
        body["adam"]["v"] = _unpack(body["adam"]["v"])
    return body


def save(path, params: dict, adam=None, epoch: int = 0, config_hash: str = "", seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(encode(params, adam, epoch, config_hash, seed))
    os.replace(tmp, path)
    return path


def load(path) -> dict:
    return decode(Path(path).read_text())
