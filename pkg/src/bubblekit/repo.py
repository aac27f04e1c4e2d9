"""On-disk repository: a disk-backed store plus serialized federation state.

Layout under the repository root:

    store/                 blobs, snapshots, MANIFEST
    bubbles/<id>.json      canonical descriptor bytes
    signals/<id>.json      canonical signal payloads (pending-stress durability)
    log/stress.log         append-only decision audit
    log/deliveries.jsonl   delivery records (hops, status)
    meta.json              logical clock, descriptor histories, sync conflicts
"""

from __future__ import annotations

import json
import os

from .engine import AuditEntry, Federation
from .errors import RepositoryError
from .model import BubbleDescriptor, canonical_json
from .store import DiskResourceStore
from .stress import ChangeSet, DeliveryRecord, StressSignal

META_FILE = "meta.json"


def is_repo(root: str) -> bool:
    return os.path.exists(os.path.join(root, "store", "MANIFEST"))


def init_repo(root: str) -> Federation:
    if is_repo(root):
        raise RepositoryError(f"repository already initialized at {root}")
    os.makedirs(root, exist_ok=True)
    for sub in ("bubbles", "signals", "log"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    store = DiskResourceStore.create(os.path.join(root, "store"))
    fed = Federation(store=store)
    save_federation(fed, root)
    return fed


def load_federation(root: str) -> Federation:
    if not is_repo(root):
        raise RepositoryError(f"no repository at {root}")
    store = DiskResourceStore(os.path.join(root, "store"))
    fed = Federation(store=store)

    bubbles_dir = os.path.join(root, "bubbles")
    for fname in sorted(os.listdir(bubbles_dir)):
        if not fname.endswith(".json"):
            continue
        with open(os.path.join(bubbles_dir, fname), "rb") as fh:
            data = json.loads(fh.read().decode("ascii"))
        descriptor = BubbleDescriptor.from_dict(data)
        if descriptor.id != fname[:-5]:
            raise RepositoryError(f"descriptor id mismatch in {fname}")
        fed.descriptors[descriptor.id] = descriptor

    signals_dir = os.path.join(root, "signals")
    if os.path.isdir(signals_dir):
        for fname in sorted(os.listdir(signals_dir)):
            if not fname.endswith(".json"):
                continue
            with open(os.path.join(signals_dir, fname), "rb") as fh:
                data = json.loads(fh.read().decode("ascii"))
            signal = StressSignal.from_dict(data)
            fed.signals[signal.signal_id] = signal
            cs = signal.changeset
            fed.changesets.setdefault(cs.change_id, cs)

    deliveries_path = os.path.join(root, "log", "deliveries.jsonl")
    if os.path.exists(deliveries_path):
        with open(deliveries_path, encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = DeliveryRecord.from_dict(json.loads(line))
                fed.deliveries[(record.signal_id, record.bubble)] = record

    audit_path = os.path.join(root, "log", "stress.log")
    if os.path.exists(audit_path):
        with open(audit_path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ", 4)
                if len(parts) == 5:
                    at, sid, bubble, decision, actor = parts
                    fed.audit.append(AuditEntry(int(at), sid, bubble, decision, actor))

    meta_path = os.path.join(root, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, encoding="ascii") as fh:
            meta = json.load(fh)
        fed.clock = meta.get("clock", 0)
        fed.histories = {k: list(v) for k, v in meta.get("histories", {}).items()}
        fed.sync_conflicts = list(meta.get("conflicts", []))
    return fed


def save_federation(fed: Federation, root: str) -> None:
    bubbles_dir = os.path.join(root, "bubbles")
    signals_dir = os.path.join(root, "signals")
    log_dir = os.path.join(root, "log")
    for d in (bubbles_dir, signals_dir, log_dir):
        os.makedirs(d, exist_ok=True)

    for bid, descriptor in fed.descriptors.items():
        with open(os.path.join(bubbles_dir, f"{bid}.json"), "wb") as fh:
            fh.write(canonical_json(descriptor.to_dict()))

    for sid, signal in fed.signals.items():
        with open(os.path.join(signals_dir, f"{sid}.json"), "wb") as fh:
            fh.write(canonical_json(signal.to_dict()))

    with open(os.path.join(log_dir, "deliveries.jsonl"), "wb") as fh:
        for key in sorted(fed.deliveries):
            fh.write(canonical_json(fed.deliveries[key].to_dict()) + b"\n")

    with open(os.path.join(log_dir, "stress.log"), "w", encoding="utf-8") as fh:
        for entry in fed.audit:
            fh.write(entry.line() + "\n")

    meta = {
        "format": 1,
        "clock": fed.clock,
        "histories": {k: list(v) for k, v in fed.histories.items()},
        "conflicts": fed.sync_conflicts,
    }
    with open(os.path.join(root, META_FILE), "wb") as fh:
        fh.write(canonical_json(meta))
