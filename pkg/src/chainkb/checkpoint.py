"""Versioned binary checkpoints.

Layout (all offsets in bytes)::

    b"CHAINKB-CKPT\\n"                    magic line
    b"version 1\\n"
    b"header <N>\\n"                      N = byte length of the JSON header
    <N bytes UTF-8 JSON, keys sorted, no whitespace>
    <array payloads, in header order, little-endian float64, C order>

The JSON header holds ``config`` (model configuration), ``vocab``
(relation / query-relation / type / entity names), ``pathquery`` (bool),
``extra`` (free-form run metadata) and ``arrays``: a list of
``{"name", "shape", "offset"}`` records where ``offset`` counts from the
first payload byte. Writing the same parameters twice yields identical
bytes, and load followed by save reproduces the file exactly.
"""

from __future__ import annotations

import json
from pathlib import Path as FsPath

import numpy as np

from .pathmodel import ModelConfig, ModelParams

MAGIC = b"CHAINKB-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    records = []
    payload = []
    offset = 0
    for name in sorted(params.arrays):
        a = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        records.append({"name": name, "shape": list(a.shape), "offset": offset})
        payload.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = {
        "config": params.config.to_dict(),
        "vocab": {
            "relations": params.relations,
            "query_relations": params.query_relations,
            "types": params.types,
            "entities": params.entities,
        },
        "pathquery": params.pathquery,
        "extra": extra or {},
        "arrays": records,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return b"".join([MAGIC, f"version {VERSION}\n".encode(), f"header {len(hbytes)}\n".encode(), hbytes, *payload])


def from_bytes(data: bytes) -> tuple[ModelParams, dict]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a chainkb checkpoint (bad magic)")
    pos = len(MAGIC)

    def line() -> str:
        nonlocal pos
        end = data.index(b"\n", pos)
        text = data[pos:end].decode("ascii")
        pos = end + 1
        return text

    try:
        key, ver = line().split()
        if key != "version" or int(ver) != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {ver}")
        key, n = line().split()
        if key != "header":
            raise CheckpointError("missing header length")
        n = int(n)
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint preamble: {exc}") from None
    header = json.loads(data[pos : pos + n].decode("utf-8"))
    base = pos + n
    arrays = {}
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + rec["offset"]
        end = start + 8 * count
        if end > len(data):
            raise CheckpointError(f"truncated payload for {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(data[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    v = header["vocab"]
    params = ModelParams(
        ModelConfig(**header["config"]),
        arrays,
        v["relations"],
        v["query_relations"],
        v["types"],
        v["entities"],
        header.get("pathquery", False),
    )
    return params, header.get("extra", {})


def save(params: ModelParams, path, extra: dict | None = None) -> None:
    FsPath(path).write_bytes(to_bytes(params, extra))


def load(path) -> tuple[ModelParams, dict]:
    return from_bytes(FsPath(path).read_bytes())
