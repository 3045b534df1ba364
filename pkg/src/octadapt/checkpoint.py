"""Self-describing checkpoint container: a versioned magic number, a JSON
header echoing the producing config plus an array directory, and raw
little-endian payloads. Arrays round-trip bit-exactly (float32/int64 only)
so a save/load cycle restores identical forward passes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

CHECKPOINT_MAGIC = b"OCTC"
CHECKPOINT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    arrays: dict[str, np.ndarray]


def _canonical(arr: np.ndarray) -> tuple[str, np.ndarray]:
    a = np.asarray(arr)
    if a.dtype == np.float32:
        code = "<f4"
    elif a.dtype == np.int64:
        code = "<i8"
    else:
        raise ContractError(f"checkpoint arrays must be float32 or int64, got {a.dtype}")
    return code, np.ascontiguousarray(a, dtype=_DTYPES[code])


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    directory, blobs = [], []
    for name, arr in arrays.items():
        code, a = _canonical(arr)
        directory.append({"name": name, "dtype": code, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": directory},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container (bad magic)")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header")
    version, header_len = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    for key in ("kind", "meta", "arrays"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    if expected_kind is not None and header["kind"] != expected_kind:
        raise FormatError(
            f"{path}: checkpoint kind {header['kind']!r}, expected {expected_kind!r}")

    offset = 10 + header_len
    arrays = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: unknown array dtype {entry['dtype']!r}")
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dt, count=int(np.prod(shape, dtype=np.int64)) if shape else 1,
            offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return Checkpoint(kind=header["kind"], meta=header["meta"], arrays=arrays)
