"""Immutable, content-addressed pipeline snapshots.

A snapshot directory holds ``manifest.json`` (all JSON-typed results),
``tensors.bin`` (centroids, CAV weights, influence matrices; same binary
entry format as model containers), and ``patches/`` (PNG thumbnails of
concept member segments). The snapshot id is a SHA-256 over the canonical
manifest (minus the id and timestamp) plus the tensor blob, so equal
pipelines produce equal ids and any byte flip is detectable.
"""

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._blob import read_blob, write_blob
from .errors import SnapshotCorruptionError, UnsupportedSnapshotVersionError

SCHEMA_VERSION = 1

MANIFEST_JSON = "manifest.json"
TENSORS_BIN = "tensors.bin"
PATCHES_DIR = "patches"


@dataclass(eq=False)
class ConceptSpaceSnapshot:
    manifest: dict
    tensors: dict[str, np.ndarray]
    patch_bytes: dict[str, bytes] = field(default_factory=dict)
    directory: str | None = None

    @property
    def snapshot_id(self) -> str:
        return self.manifest["snapshot_id"]

    def tensor(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def patch_png(self, segment_id: str) -> bytes:
        if segment_id in self.patch_bytes:
            return self.patch_bytes[segment_id]
        if self.directory is None:
            raise KeyError(segment_id)
        path = os.path.join(self.directory, PATCHES_DIR, f"{segment_id}.png")
        with open(path, "rb") as fh:
            return fh.read()

    def __eq__(self, other: object) -> bool:
        """Content equality: everything that feeds the snapshot id. The
        creation timestamp is metadata, not content."""
        if not isinstance(other, ConceptSpaceSnapshot):
            return NotImplemented
        mine = {k: v for k, v in self.manifest.items() if k != "created_at"}
        theirs = {k: v for k, v in other.manifest.items() if k != "created_at"}
        if mine != theirs:
            return False
        if sorted(self.tensors) != sorted(other.tensors):
            return False
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def canonical_manifest_bytes(manifest: dict) -> bytes:
    """Canonical serialization: sorted keys, no whitespace, no NaN, and
    with the two non-content fields removed."""
    view = {k: v for k, v in manifest.items() if k not in ("snapshot_id", "created_at")}
    return json.dumps(view, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def tensors_blob(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_blob(buf, [tensors[name] for name in sorted(tensors)])
    return buf.getvalue()


def compute_snapshot_id(manifest: dict, blob: bytes) -> str:
    h = hashlib.sha256()
    h.update(canonical_manifest_bytes(manifest))
    h.update(b"\x00")
    h.update(hashlib.sha256(blob).digest())
    return h.hexdigest()


def finalize_snapshot(
    manifest: dict, tensors: dict[str, np.ndarray], patch_bytes: dict[str, bytes], created_at: str
) -> ConceptSpaceSnapshot:
    """Stamp the content hash and timestamp onto a manifest under
    construction. Patch digests enter the manifest (and therefore the id)
    before hashing."""
    manifest = dict(manifest)
    manifest["schema_version"] = SCHEMA_VERSION
    manifest["patches"] = {
        sid: hashlib.sha256(png).hexdigest() for sid, png in sorted(patch_bytes.items())
    }
    manifest["tensor_names"] = sorted(tensors)
    blob = tensors_blob(tensors)
    manifest["tensors_sha256"] = hashlib.sha256(blob).hexdigest()
    manifest["snapshot_id"] = compute_snapshot_id(manifest, blob)
    manifest["created_at"] = created_at
    return ConceptSpaceSnapshot(manifest=manifest, tensors=tensors, patch_bytes=patch_bytes)


def save_snapshot(snapshot: ConceptSpaceSnapshot, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    blob = tensors_blob(snapshot.tensors)
    with open(os.path.join(directory, TENSORS_BIN), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(directory, MANIFEST_JSON), "w", encoding="utf-8") as fh:
        json.dump(snapshot.manifest, fh, indent=1, sort_keys=True)
    patches_dir = os.path.join(directory, PATCHES_DIR)
    os.makedirs(patches_dir, exist_ok=True)
    for sid, png in snapshot.patch_bytes.items():
        with open(os.path.join(patches_dir, f"{sid}.png"), "wb") as fh:
            fh.write(png)
    snapshot.directory = directory
    return directory


def load_snapshot(directory: str) -> ConceptSpaceSnapshot:
    """Read a snapshot back, verifying the tensor digest and the content
    hash; any mismatch is corruption, an unknown schema version is refused
    explicitly."""
    with open(os.path.join(directory, MANIFEST_JSON), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UnsupportedSnapshotVersionError(
            f"snapshot schema version {version!r}; this build reads {SCHEMA_VERSION}"
        )
    with open(os.path.join(directory, TENSORS_BIN), "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest.get("tensors_sha256"):
        raise SnapshotCorruptionError("tensor blob digest mismatch")
    expected_id = compute_snapshot_id(manifest, blob)
    if expected_id != manifest.get("snapshot_id"):
        raise SnapshotCorruptionError("snapshot id does not match content")
    tensors = read_blob(io.BytesIO(blob), sorted(manifest["tensor_names"]))
    return ConceptSpaceSnapshot(manifest=manifest, tensors=tensors, directory=directory)
