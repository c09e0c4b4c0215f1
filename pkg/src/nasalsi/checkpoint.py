"""Versioned binary checkpoint with a named-tensor directory.

Layout (little-endian)::

    b"NSIC" | u32 version | u32 header_len | header JSON | float32 payload

The header records the model config, normalization stats, free-form
metadata and, for every tensor, its name, kind (param/buffer), shape and
offset (in float32 elements) into the payload.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .model import ModelConfig, ModelParameters

log = logging.getLogger(__name__)

MAGIC = b"NSIC"
VERSION = 1


def save_checkpoint(path, params: ModelParameters, norm_stats=None, meta=None):
    directory = []
    chunks = []
    offset = 0
    for kind, group in (("param", params.tensors), ("buffer", params.buffers)):
        for name, arr in group.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            directory.append({"name": name, "kind": kind, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.size
    cfg = asdict(params.config)
    cfg["heads"] = list(cfg["heads"])
    header = json.dumps({
        "config": cfg,
        "tensors": directory,
        "norm_stats": norm_stats or {},
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, expected_heads=None, allow_egg_drop=False):
    """Load ``(params, header)``.

    When ``expected_heads`` is given the stored head set must match it; the
    only tolerated difference is an extra ``egg_env`` head with
    ``allow_egg_drop=True``, which is removed.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12: 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    payload = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    cfg = dict(header["config"])
    cfg["heads"] = tuple(cfg["heads"])
    config = ModelConfig(**cfg)
    tensors, buffers = {}, {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + n > payload.size:
            raise FormatError(f"{path}: payload truncated at tensor {entry['name']}")
        arr = payload[start: start + n].astype(np.float64).reshape(entry["shape"])
        (tensors if entry["kind"] == "param" else buffers)[entry["name"]] = arr
    params = ModelParameters(config, tensors, buffers)
    if expected_heads is not None:
        want = set(expected_heads)
        have = set(config.heads)
        if have != want:
            if allow_egg_drop and have == want | {"egg_env"}:
                log.info("%s: dropping egg_env head on load", path)
                params = params.drop_head("egg_env")
            else:
                raise ShapeError(f"{path}: checkpoint heads {sorted(have)} != expected {sorted(want)}")
    return params, header
