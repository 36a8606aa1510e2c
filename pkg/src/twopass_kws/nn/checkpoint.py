"""Single-file checkpoints: one JSON header line, then raw parameter payloads.

The header records version, dtype, RNG seed and the ordered list of
(name, shape) entries; payloads follow as little-endian floats in header
order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import hashlib
import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, named_params, seed: int | None = None, meta: dict | None = None) -> None:
    entries = [(name, list(p.data.shape)) for name, p in named_params]
    dtype = named_params[0][1].data.dtype if named_params else np.dtype("float32")
    header = {
        "version": FORMAT_VERSION,
        "dtype": np.dtype(dtype).name,
        "seed": seed,
        "layers": [{"name": n, "shape": s} for n, s in entries],
    }
    if meta:
        header["meta"] = meta
    le = np.dtype(dtype).newbyteorder("<")
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for _, p in named_params:
            f.write(np.ascontiguousarray(p.data, dtype=le).tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, {name: array}); arrays are native-endian copies."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {header.get('version')}")
        le = np.dtype(header["dtype"]).newbyteorder("<")
        arrays = {}
        for entry in header["layers"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * le.itemsize)
            if len(raw) != count * le.itemsize:
                raise ValueError(f"truncated checkpoint payload for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=le).reshape(shape).astype(le.newbyteorder("="))
    return header, arrays


def restore_into(module, arrays: dict) -> None:
    """Copy checkpoint arrays into a module's parameters by name."""
    params = dict(module.named_parameters())
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
