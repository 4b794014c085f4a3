"""On-disk checkpoints: manifest.json + tensors.bin (little-endian f32)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .params import ParamSet

__all__ = ["save_checkpoint", "load_checkpoint", "load_manifest"]


def save_checkpoint(directory, ps: ParamSet, meta: dict | None = None) -> None:
    """Write one ParamSet as manifest.json plus a raw row-major blob.

    The manifest records name/shape/dtype/offset/flags per tensor so the
    blob can be sliced back without guessing; saving a loaded checkpoint
    reproduces both files byte-for-byte.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name, arr in ps.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": offset,
                "nbytes": len(blob),
                "aggregable": ps.is_aggregable(name),
            }
        )
        chunks.append(blob)
        offset += len(blob)
    manifest = dict(meta or {})
    manifest["role"] = ps.role
    manifest["total_bytes"] = offset
    manifest["tensors"] = tensors
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (directory / "tensors.bin").write_bytes(b"".join(chunks))


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    return json.loads(path.read_text())


def load_checkpoint(directory) -> tuple[ParamSet, dict]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    blob = (directory / "tensors.bin").read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise FormatError(
            f"{directory}: blob is {len(blob)} bytes, manifest says {manifest.get('total_bytes')}"
        )
    ps = ParamSet(manifest.get("role", "extractor"))
    for t in manifest["tensors"]:
        if t["dtype"] != "f32":
            raise FormatError(f"{directory}: unsupported dtype {t['dtype']!r} for {t['name']!r}")
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["nbytes"] != 4 * n:
            raise FormatError(f"{directory}: tensor {t['name']!r} nbytes/shape mismatch")
        if t["offset"] + t["nbytes"] > len(blob):
            raise FormatError(f"{directory}: tensor {t['name']!r} extends past blob end")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=t["offset"]).reshape(t["shape"])
        ps.add(t["name"], arr.copy(), t["aggregable"])
    return ps, manifest
