"""Checkpoint container: a manifest plus one little-endian float64 blob.

A checkpoint is a directory holding `manifest.json` (entry names, shapes,
byte offsets, a config snapshot, format version) and `params.bin`, the
concatenation of every entry as little-endian 64-bit floats. Entries are
sorted by name so identical state always produces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StateError

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass
class CheckpointRecord:
    """In-memory checkpoint: named float64 arrays plus a metadata dict."""

    entries: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = sorted(self.entries)
        records = []
        offset = 0
        with open(directory / BLOB_NAME, "wb") as blob:
            for name in names:
                arr = np.ascontiguousarray(self.entries[name], dtype="<f8")
                blob.write(arr.tobytes())
                records.append(
                    {"name": name, "shape": list(arr.shape), "offset": offset, "count": arr.size}
                )
                offset += arr.size * 8
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "meta": self.meta,
            "entries": records,
        }
        with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "CheckpointRecord":
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        blob_path = directory / BLOB_NAME
        if not manifest_path.exists() or not blob_path.exists():
            raise StateError(f"no checkpoint at {directory}")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise StateError(
                f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
            )
        raw = blob_path.read_bytes()
        entries: dict[str, np.ndarray] = {}
        for rec in manifest["entries"]:
            count = rec["count"]
            if rec["offset"] + count * 8 > len(raw):
                raise StateError(
                    f"checkpoint blob truncated: entry {rec['name']!r} ends past {len(raw)} bytes"
                )
            arr = np.frombuffer(
                raw, dtype="<f8", count=count, offset=rec["offset"]
            ).astype(np.float64)
            entries[rec["name"]] = arr.reshape(rec["shape"])
        return cls(entries=entries, meta=manifest.get("meta", {}))
