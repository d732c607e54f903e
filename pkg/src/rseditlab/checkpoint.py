"""Deterministic binary checkpoints.

Layout: magic, little-endian u32 header length, canonical-JSON header
(format version, config digest, step, ordered array directory), then raw
float64 array payloads in directory order.  Identical state serializes to
identical bytes, and loading restores bitwise-identical forward outputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"RSEDITLAB1"
FORMAT_VERSION = 1


def save_checkpoint(path, step: int, config_digest: str,
                    arrays: dict[str, np.ndarray]) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest,
        "step": int(step),
        "arrays": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise InputError(f"{path} is not a checkpoint file")
    offset = len(MAGIC)
    (header_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(
            f"unsupported checkpoint format version {header.get('format_version')}")
    offset += header_len
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += count * 8
    if offset != len(data):
        raise InputError(f"checkpoint {path} has trailing bytes")
    return header, arrays


def model_state(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_model_state(model, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(arrays)
    extra = {k for k in arrays if not k.startswith("adam.")} - set(params)
    if missing or extra:
        raise InputError(
            f"checkpoint/model parameter mismatch; missing={sorted(missing)[:4]} "
            f"extra={sorted(extra)[:4]}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != p.shape:
            raise InputError(
                f"parameter {name} shape {arr.shape} != model shape {p.shape}")
        p.data = arr.copy()
