"""Content-addressed blob store with immutable snapshot records.

Blobs are keyed by the sha256 of their raw bytes; storing identical bytes
twice keeps a single physical copy. Snapshot records freeze a path->digest
mapping under a content-derived id, so identical entry maps always produce
the identical snapshot id.

Disk layout:

    store/blobs/<first-2-hex>/<remaining-hex>   raw blob bytes
    store/snapshots/<snapshot_id>.tsv           canonical entries text
    store/MANIFEST                              format + hash algorithm

Garbage collection is explicit and never automatic: callers hand in the
set of live roots (snapshot ids and/or digests) and unreachable blobs are
removed. Snapshot files are never deleted.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import threading
from dataclasses import dataclass, field

from .errors import DanglingDigest, NotFound, RepositoryError

HASH_NAME = "sha256"
DIGEST_LEN = 64
STORE_FORMAT = 1


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_digest(value: str) -> bool:
    if not isinstance(value, str) or len(value) != DIGEST_LEN:
        return False
    return all(c in "0123456789abcdef" for c in value)


def snapshot_text(entries: dict[str, str]) -> str:
    """Canonical serialization: paths sorted bytewise, one path TAB digest line each."""
    lines = []
    for path in sorted(entries, key=lambda p: p.encode("utf-8")):
        lines.append(f"{path}\t{entries[path]}\n")
    return "".join(lines)


def snapshot_id_for(entries: dict[str, str]) -> str:
    return hash_bytes(snapshot_text(entries).encode("utf-8"))


@dataclass(frozen=True)
class SnapshotRecord:
    snapshot_id: str
    entries: dict[str, str]
    taken_at: int
    bubble: str | None

    def text(self) -> str:
        return snapshot_text(self.entries)


class MemoryResourceStore:
    """In-memory store with the same contract as the disk-backed one."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}
        self._snapshots: dict[str, SnapshotRecord] = {}
        self._lock = threading.Lock()

    def put_blob(self, data: bytes) -> str:
        digest = hash_bytes(data)
        with self._lock:
            self._blobs.setdefault(digest, bytes(data))
        return digest

    def get_blob(self, digest: str) -> bytes:
        try:
            return self._blobs[digest]
        except KeyError:
            raise NotFound(f"no blob {digest}") from None

    def has_blob(self, digest: str) -> bool:
        return digest in self._blobs

    def blob_count(self) -> int:
        return len(self._blobs)

    def iter_digests(self):
        return iter(sorted(self._blobs))

    def record_snapshot(
        self,
        bubble: str | None,
        entries: dict[str, str],
        taken_at: int = 0,
        require_present: bool = True,
    ) -> SnapshotRecord:
        if require_present:
            missing = [d for d in entries.values() if d not in self._blobs]
            if missing:
                raise DanglingDigest(f"snapshot references unstored digests: {missing[:3]}")
        record = SnapshotRecord(snapshot_id_for(entries), dict(entries), taken_at, bubble)
        with self._lock:
            self._snapshots.setdefault(record.snapshot_id, record)
        return record

    def get_snapshot(self, snapshot_id: str) -> SnapshotRecord:
        try:
            return self._snapshots[snapshot_id]
        except KeyError:
            raise NotFound(f"no snapshot {snapshot_id}") from None

    def has_snapshot(self, snapshot_id: str) -> bool:
        return snapshot_id in self._snapshots

    def list_snapshots(self) -> list[str]:
        return sorted(self._snapshots)

    def gc(self, live_roots: set[str]) -> int:
        marked = _mark(self, live_roots)
        with self._lock:
            dead = [d for d in self._blobs if d not in marked]
            for d in dead:
                del self._blobs[d]
        return len(dead)


class DiskResourceStore:
    """Store rooted at a directory, safe for concurrent readers.

    Writes go through a temp file + rename so a reader never observes a
    partially written blob.
    """

    def __init__(self, root: str):
        self.root = root
        self._lock = threading.Lock()
        manifest = os.path.join(root, "MANIFEST")
        if not os.path.exists(manifest):
            raise RepositoryError(f"no store at {root} (missing MANIFEST)")
        self._check_manifest(manifest)
        self._snapshot_meta: dict[str, tuple[int, str | None]] = {}

    @classmethod
    def create(cls, root: str) -> "DiskResourceStore":
        os.makedirs(os.path.join(root, "blobs"), exist_ok=True)
        os.makedirs(os.path.join(root, "snapshots"), exist_ok=True)
        manifest = os.path.join(root, "MANIFEST")
        if not os.path.exists(manifest):
            with open(manifest, "w", encoding="utf-8") as fh:
                fh.write(f"format={STORE_FORMAT}\nhash={HASH_NAME}\n")
        return cls(root)

    @staticmethod
    def _check_manifest(path: str) -> None:
        fields = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.strip().split("=", 1)
                    fields[k] = v
        if fields.get("hash") not in (None, HASH_NAME):
            raise RepositoryError(f"store uses unsupported hash {fields.get('hash')!r}")

    def _blob_path(self, digest: str) -> str:
        return os.path.join(self.root, "blobs", digest[:2], digest[2:])

    def put_blob(self, data: bytes) -> str:
        digest = hash_bytes(data)
        target = self._blob_path(digest)
        if os.path.exists(target):
            return digest
        with self._lock:
            if not os.path.exists(target):
                os.makedirs(os.path.dirname(target), exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=os.path.dirname(target))
                try:
                    with os.fdopen(fd, "wb") as fh:
                        fh.write(data)
                    os.replace(tmp, target)
                except BaseException:
                    if os.path.exists(tmp):
                        os.unlink(tmp)
                    raise
        return digest

    def get_blob(self, digest: str) -> bytes:
        try:
            with open(self._blob_path(digest), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise NotFound(f"no blob {digest}") from None

    def has_blob(self, digest: str) -> bool:
        return os.path.exists(self._blob_path(digest))

    def blob_count(self) -> int:
        return sum(1 for _ in self.iter_digests())

    def iter_digests(self):
        blobs_dir = os.path.join(self.root, "blobs")
        out = []
        for shard in os.listdir(blobs_dir):
            shard_dir = os.path.join(blobs_dir, shard)
            if not os.path.isdir(shard_dir):
                continue
            for rest in os.listdir(shard_dir):
                out.append(shard + rest)
        return iter(sorted(out))

    def _snapshot_path(self, snapshot_id: str) -> str:
        return os.path.join(self.root, "snapshots", snapshot_id + ".tsv")

    def record_snapshot(
        self,
        bubble: str | None,
        entries: dict[str, str],
        taken_at: int = 0,
        require_present: bool = True,
    ) -> SnapshotRecord:
        if require_present:
            missing = [d for d in entries.values() if not self.has_blob(d)]
            if missing:
                raise DanglingDigest(f"snapshot references unstored digests: {missing[:3]}")
        text = snapshot_text(entries)
        snapshot_id = hash_bytes(text.encode("utf-8"))
        target = self._snapshot_path(snapshot_id)
        with self._lock:
            if not os.path.exists(target):
                fd, tmp = tempfile.mkstemp(dir=os.path.dirname(target))
                with os.fdopen(fd, "wb") as fh:
                    fh.write(text.encode("utf-8"))
                os.replace(tmp, target)
            self._snapshot_meta.setdefault(snapshot_id, (taken_at, bubble))
        return SnapshotRecord(snapshot_id, dict(entries), taken_at, bubble)

    def get_snapshot(self, snapshot_id: str) -> SnapshotRecord:
        try:
            with open(self._snapshot_path(snapshot_id), encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise NotFound(f"no snapshot {snapshot_id}") from None
        entries = {}
        for line in text.splitlines():
            path, digest = line.split("\t", 1)
            entries[path] = digest
        taken_at, bubble = self._snapshot_meta.get(snapshot_id, (0, None))
        return SnapshotRecord(snapshot_id, entries, taken_at, bubble)

    def has_snapshot(self, snapshot_id: str) -> bool:
        return os.path.exists(self._snapshot_path(snapshot_id))

    def list_snapshots(self) -> list[str]:
        snap_dir = os.path.join(self.root, "snapshots")
        return sorted(f[:-4] for f in os.listdir(snap_dir) if f.endswith(".tsv"))

    def gc(self, live_roots: set[str]) -> int:
        marked = _mark(self, live_roots)
        removed = 0
        with self._lock:
            for digest in list(self.iter_digests()):
                if digest not in marked:
                    os.unlink(self._blob_path(digest))
                    removed += 1
        return removed


def _mark(store, live_roots: set[str]) -> set[str]:
    """Roots may be blob digests or snapshot ids; snapshots contribute their entries."""
    marked: set[str] = set()
    for root in live_roots:
        if store.has_snapshot(root):
            marked.update(store.get_snapshot(root).entries.values())
        if store.has_blob(root):
            marked.add(root)
    return marked
