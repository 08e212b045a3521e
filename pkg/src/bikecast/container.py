"""Binary container used for datasets, graphs, embedding tables, and checkpoints.

Layout, in order:

* 4 magic bytes ``b"BKC1"``
* uint32 little-endian header length
* UTF-8 JSON header: ``{"kind": ..., "arrays": [{"name", "shape"}, ...],
  "meta": {...}}`` with sorted keys and no whitespace
* the arrays' payloads, concatenated in manifest order, each C-contiguous
  little-endian float64

Writing the same content twice yields byte-identical files, which is what the
reproducibility checks diff.
"""
from __future__ import annotations

import json
import struct
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

MAGIC = b"BKC1"


def write_container(
    path: str,
    kind: str,
    arrays: Sequence[tuple[str, np.ndarray]],
    meta: Mapping | None = None,
) -> None:
    manifest = []
    payloads = []
    seen = set()
    for name, arr in arrays:
        if name in seen:
            raise ValidationError(f"duplicate array name {name!r} in container")
        seen.add(name)
        a = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        if not np.isfinite(a).all():
            raise ValidationError(f"array {name!r} contains non-finite values")
        manifest.append({"name": name, "shape": list(a.shape)})
        payloads.append(a.tobytes())
    header = json.dumps(
        {"kind": kind, "arrays": manifest, "meta": dict(meta or {})},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def read_container(path: str) -> tuple[str, dict[str, np.ndarray], dict]:
    """Read a container; returns (kind, {name: array}, meta).

    Raises ValidationError on a bad magic, truncation, or a header/payload
    mismatch, always naming the path.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValidationError(f"{path}: not a container file (bad magic {blob[:4]!r})")
    if len(blob) < 8:
        raise ValidationError(f"{path}: truncated before header length")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise ValidationError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt container header: {exc}") from exc
    if not isinstance(header, dict) or "kind" not in header or "arrays" not in header:
        raise ValidationError(f"{path}: container header missing required keys")
    arrays: dict[str, np.ndarray] = {}
    offset = 8 + header_len
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ValidationError(f"{path}: truncated payload for array {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ValidationError(f"{path}: {len(blob) - offset} trailing bytes after payloads")
    return header["kind"], arrays, header.get("meta", {})


def expect_kind(path: str, kind: str, found: str) -> None:
    if found != kind:
        raise ValidationError(f"{path}: expected a {kind!r} container, found {found!r}")
