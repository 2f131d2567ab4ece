"""Artifact persistence: JSON manifest + raw little-endian float32 blob.

Every artifact is a pair of files, ``<stem>.json`` and ``<stem>.bin``.
The manifest carries free-form metadata plus one (name, shape, offset)
record per tensor; the blob holds the tensors back to back as
little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import UsageError

FORMAT = "diffret-blob-v1"
TOOL_VERSION = "0.1.0"


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(payload.encode(), digest_size=8).hexdigest()


def write_blob(stem: str, tensors: dict, meta: dict | None = None) -> str:
    """Write tensors and metadata; returns the manifest path."""
    stem = str(stem)
    if stem.endswith(".json"):
        stem = stem[:-5]
    records = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        records.append({"name": name, "shape": list(data.shape),
                        "dtype": "float32", "offset": offset,
                        "nbytes": data.nbytes})
        offset += data.nbytes
        chunks.append(data.tobytes())
    manifest = {
        "format": FORMAT,
        "tool_version": TOOL_VERSION,
        "meta": meta or {},
        "blob": os.path.basename(stem) + ".bin",
        "tensors": records,
    }
    with open(stem + ".bin", "wb") as f:
        f.write(b"".join(chunks))
    with open(stem + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return stem + ".json"


def read_manifest(path: str) -> dict:
    path = str(path)
    if not path.endswith(".json"):
        path += ".json"
    if not os.path.exists(path):
        raise UsageError(f"missing artifact: {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT:
        raise UsageError(f"{path}: not a {FORMAT} artifact")
    return manifest


def read_blob(path: str) -> tuple[dict, dict]:
    """Read an artifact; returns (meta, {name: float32 ndarray})."""
    path = str(path)
    if not path.endswith(".json"):
        path += ".json"
    manifest = read_manifest(path)
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                             manifest["blob"])
    with open(blob_path, "rb") as f:
        raw = f.read()
    tensors = {}
    for rec in manifest["tensors"]:
        buf = raw[rec["offset"]:rec["offset"] + rec["nbytes"]]
        tensors[rec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(rec["shape"]).copy()
    return manifest["meta"], tensors
