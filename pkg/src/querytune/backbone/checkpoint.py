"""Checkpoint container: a zip holding manifest.json plus one raw tensor blob.

The manifest lists every tensor (name, shape, dtype, byte offset into the
blob) in a fixed order plus a free-form ``meta`` dict for whatever the
caller wants to persist alongside (model config, schedule constants,
training provenance).  Tensors are stored as little-endian float32 packed
back to back; loading restores float64 arrays, so a save/load round trip
quantizes parameters to float32 precision once.

Zip entries carry a fixed timestamp, making checkpoint bytes a pure
function of their contents.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from ..errors import CheckpointError

FORMAT_TAG = "querytune-checkpoint"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = list(tensors)
    blob = io.BytesIO()
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        blob.write(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_TAG, "version": 1, "meta": meta, "tensors": entries,
                "blob_bytes": offset}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for entry_name, data in (("manifest.json", json.dumps(manifest, indent=1).encode()),
                                 ("params.bin", blob.getvalue())):
            info = zipfile.ZipInfo(entry_name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("params.bin")
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} file")
    if manifest.get("blob_bytes") != len(blob):
        raise CheckpointError(f"{path}: blob length {len(blob)} does not match manifest")
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return tensors, manifest.get("meta", {})
