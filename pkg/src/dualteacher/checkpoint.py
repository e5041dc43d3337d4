"""Portable JSON checkpoints.

Tensors and arrays are stored as base64 of their little-endian bytes next to
dtype and shape, so files are byte-order independent and round-trip exactly.
Non-string dict keys and tuples are tagged to survive JSON.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, DatasetFormatError

CHECKPOINT_FORMAT = 1


def _encode_array(arr: np.ndarray):
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": arr.dtype.name,
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
    }


def _decode_array(d):
    dtype = np.dtype(d["dtype"]).newbyteorder("<")
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype=dtype).reshape(d["shape"])
    return arr.astype(arr.dtype.newbyteorder("="))


def encode(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": _encode_array(obj.detach().cpu().numpy())}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": _encode_array(obj)}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: encode(v) for k, v in obj.items()}
        return {"__items__": [[encode(k), encode(v)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [encode(v) for v in obj]}
    if isinstance(obj, list):
        return [encode(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    return obj


def decode(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return torch.from_numpy(_decode_array(obj["__tensor__"]).copy())
        if "__ndarray__" in obj:
            return _decode_array(obj["__ndarray__"]).copy()
        if "__items__" in obj:
            return {decode(k): decode(v) for k, v in obj["__items__"]}
        if "__tuple__" in obj:
            return tuple(decode(v) for v in obj["__tuple__"])
        return {k: decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [decode(v) for v in obj]
    return obj


def config_hash(config_dict) -> str:
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_checkpoint(payload: dict, path) -> Path:
    """Write atomically so an interrupted save never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload, format=CHECKPOINT_FORMAT)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(encode(body), sort_keys=True))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_hash=None) -> dict:
    try:
        body = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"checkpoint not found: {path}") from exc
    if body.get("format") != CHECKPOINT_FORMAT:
        raise DatasetFormatError(f"unsupported checkpoint format {body.get('format')!r}")
    if expected_hash is not None and body.get("config_hash") != expected_hash:
        raise ConfigurationError(
            "checkpoint was written by a different TrainConfig (config hash mismatch)"
        )
    return decode(body)
