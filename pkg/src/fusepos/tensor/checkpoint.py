"""Parameter checkpoint container.

Layout (all integers little-endian)::

    b"FPCK\\x01\\n"                 6-byte magic + version
    uint64                          header length in bytes
    header                          UTF-8 JSON, keys sorted:
        {"params": [{"name", "shape", "offset", "count"}, ...],
         "metadata": {...},
         "content_hash": sha256 hex of the data block}
    data                            concatenated float64 ('<f8') values in
                                    row-major order, at the listed offsets

Writing the same parameters and metadata twice yields identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPCK\x01\n"


def _encode(params: dict[str, np.ndarray], metadata: dict | None) -> tuple[bytes, bytes]:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size * 8
    data = b"".join(blobs)
    header = {
        "params": entries,
        "metadata": metadata or {},
        "content_hash": hashlib.sha256(data).hexdigest(),
    }
    return json.dumps(header, sort_keys=True).encode("utf-8"), data


def content_hash(params: dict[str, np.ndarray]) -> str:
    return json.loads(_encode(params, None)[0])["content_hash"]


def save_checkpoint(path, params: dict[str, np.ndarray], metadata: dict | None = None) -> str:
    """Write ``params`` and return the data block's sha256."""
    head, data = _encode(params, metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(data)
    return json.loads(head)["content_hash"]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    data = raw[pos + hlen :]
    if hashlib.sha256(data).hexdigest() != header["content_hash"]:
        raise ValueError(f"{path}: content hash mismatch")
    params = {}
    for e in header["params"]:
        arr = np.frombuffer(data, dtype="<f8", count=e["count"], offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, header["metadata"]
