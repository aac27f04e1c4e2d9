import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bubblekit.errors import DanglingDigest, NotFound
from bubblekit.store import (
    DiskResourceStore,
    MemoryResourceStore,
    hash_bytes,
    snapshot_id_for,
    snapshot_text,
)


@pytest.fixture(params=["memory", "disk"])
def store(request, tmp_path):
    if request.param == "memory":
        return MemoryResourceStore()
    return DiskResourceStore.create(str(tmp_path / "store"))


def test_put_get_roundtrip(store):
    digest = store.put_blob(b"REQ-1 text")
    assert store.get_blob(digest) == b"REQ-1 text"
    assert len(digest) == 64


def test_empty_blob(store):
    assert store.get_blob(store.put_blob(b"")) == b""


def test_put_is_idempotent(store):
    d1 = store.put_blob(b"X")
    d2 = store.put_blob(b"X")
    assert d1 == d2
    assert store.blob_count() == 1


def test_duplicates_store_one_physical_copy(store):
    blobs = [f"blob-{i}".encode() for i in range(10)]
    for b in blobs:
        store.put_blob(b)
    for b in blobs:
        store.put_blob(b)
    assert store.blob_count() == 10


def test_get_unknown_digest(store):
    with pytest.raises(NotFound):
        store.get_blob("0" * 64)


@given(st.binary(max_size=2048))
@settings(max_examples=100, deadline=None)
def test_roundtrip_property(data):
    store = MemoryResourceStore()
    assert store.get_blob(store.put_blob(data)) == data


def test_snapshot_roundtrip(store):
    dA = store.put_blob(b"a-content")
    record = store.record_snapshot("bubble-1", {"a.txt": dA}, taken_at=7)
    back = store.get_snapshot(record.snapshot_id)
    assert back.entries == {"a.txt": dA}


def test_snapshot_id_is_canonical(store):
    d1, d2 = store.put_blob(b"one"), store.put_blob(b"two")
    r1 = store.record_snapshot("x", {"a": d1, "b": d2})
    r2 = store.record_snapshot("y", {"b": d2, "a": d1})
    assert r1.snapshot_id == r2.snapshot_id


def test_snapshot_text_sorted_bytewise():
    text = snapshot_text({"b": "2" * 64, "a": "1" * 64})
    assert text == f"a\t{'1' * 64}\nb\t{'2' * 64}\n"
    assert snapshot_id_for({"a": "1" * 64, "b": "2" * 64}) == hash_bytes(text.encode())


def test_snapshot_dangling_digest(store):
    with pytest.raises(DanglingDigest):
        store.record_snapshot("x", {"a": "f" * 64})


def test_snapshot_survives_store_mutation(tmp_path):
    store = DiskResourceStore.create(str(tmp_path / "s"))
    dA = store.put_blob(b"v1")
    record = store.record_snapshot("b", {"f": dA})
    path = os.path.join(store.root, "snapshots", record.snapshot_id + ".tsv")
    before = open(path, "rb").read()
    for i in range(5):
        store.put_blob(f"later-{i}".encode())
    store.record_snapshot("b", {"f": dA, "g": store.put_blob(b"v2")})
    assert open(path, "rb").read() == before


def test_disk_layout(tmp_path):
    root = str(tmp_path / "store")
    store = DiskResourceStore.create(root)
    digest = store.put_blob(b"payload")
    assert os.path.exists(os.path.join(root, "blobs", digest[:2], digest[2:]))
    assert open(os.path.join(root, "MANIFEST")).read() == "format=1\nhash=sha256\n"
    record = store.record_snapshot(None, {"p": digest})
    snap_file = os.path.join(root, "snapshots", record.snapshot_id + ".tsv")
    assert open(snap_file).read() == f"p\t{digest}\n"


def test_gc_all_snapshots_live(store):
    d = store.put_blob(b"kept")
    record = store.record_snapshot("b", {"f": d})
    assert store.gc({record.snapshot_id}) == 0
    assert store.get_blob(d) == b"kept"


def test_gc_removes_unreferenced(store):
    dA = store.put_blob(b"A")
    store.put_blob(b"B")
    assert store.gc({dA}) == 1
    assert store.get_blob(dA) == b"A"


def test_gc_matches_brute_force_reachability(store):
    rng = random.Random(7)
    digests = [store.put_blob(f"blob {i}".encode()) for i in range(30)]
    snapshots = []
    for i in range(6):
        entries = {f"p{j}": rng.choice(digests) for j in range(rng.randrange(1, 5))}
        snapshots.append(store.record_snapshot(f"b{i}", entries))
    roots = set(rng.sample([s.snapshot_id for s in snapshots], 3))
    roots.update(rng.sample(digests, 4))

    # brute-force mark set
    expected_live = set()
    for root in roots:
        if root in digests:
            expected_live.add(root)
    for s in snapshots:
        if s.snapshot_id in roots:
            expected_live.update(s.entries.values())
    expected_removed = set(digests) - expected_live

    assert store.gc(roots) == len(expected_removed)
    assert set(store.iter_digests()) == expected_live
