"""Single-file model checkpoint: a JSON header (format version, config,
RNG metadata, name -> offset index) followed by little-endian fp64 parameter
blocks."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMFUSE1\n"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, named_arrays: dict[str, np.ndarray],
                    config: dict, rng_meta: dict, extra: dict | None = None) -> None:
    names = sorted(named_arrays)
    index = []
    offset = 0
    for name in names:
        a = named_arrays[name]
        index.append({"name": name, "shape": list(a.shape), "offset": offset,
                      "count": int(a.size)})
        offset += a.size * 8
    header = {"format_version": FORMAT_VERSION, "config": config, "rng": rng_meta,
              "params": index}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(named_arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> array, header)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    hstart = len(MAGIC) + 8
    header = json.loads(raw[hstart:hstart + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    base = hstart + hlen
    arrays: dict[str, np.ndarray] = {}
    for rec in header["params"]:
        start = base + rec["offset"]
        end = start + rec["count"] * 8
        if end > len(raw):
            raise ValueError(f"{path}: truncated parameter block {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(raw[start:end], dtype="<f8").reshape(
            rec["shape"]).astype(np.float64)
    return arrays, header


def load_into_store(arrays: dict[str, np.ndarray], store) -> None:
    """Copy named arrays into a FlatParamStore; names must match exactly."""
    have = set(store.params)
    want = set(arrays)
    if have != want:
        missing = sorted(want - have)[:5]
        extra = sorted(have - want)[:5]
        raise ValueError(f"checkpoint/model structure mismatch "
                         f"(missing={missing}, extra={extra})")
    for name, p in store.params.items():
        if tuple(arrays[name].shape) != p.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data[...] = arrays[name]
