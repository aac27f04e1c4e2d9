"""Commit handling and design-stress propagation.

A commit on a bubble snapshots its pre-commit view, applies the edits,
and sends a change signal to every immediate structural dependent. Each
dependent resolves the signal: Accept forwards it downstream (inheritance
already delivers the new digests), Merge rebinds the conflicted paths
first, Decline pins the pre-change versions into an inserted bubble and
converts the downstream stress into a fork choice between the changed
line and the declined line. Fork choices travel the chain and re-parent
each chooser onto the tip of its chosen line, which is how a stream rips
into separate design lines.

Signals are remembered: they sit in a bubble's pending queue until an
actor resolves them, and they survive federation save/load.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .engine import AuditEntry, Federation, digest_map, resolve_view, splice_parents
from .errors import IllegalDecision, MergeIncomplete, UnknownSignal
from .model import Binding, _walks_back_to, structural_edges, validate_path


CHANGE = "change"
FORK_CHOICE = "fork_choice"

ACCEPT = "accept"
DECLINE = "decline"
MERGE = "merge"
CHOOSE_NEW = "choose_new"
CHOOSE_OLD = "choose_old"


def _short_hash(*parts: str) -> str:
    h = hashlib.sha256("\x00".join(parts).encode("utf-8")).hexdigest()
    return h[:32]


@dataclass(frozen=True)
class ChangeSet:
    """Resolution diff of one commit; before values are the pre-commit digests."""

    change_id: str
    origin: str
    commit_snapshot: str
    changes: dict[str, tuple[str | None, str | None]]  # path -> (before, after)

    def to_dict(self) -> dict:
        return {
            "change_id": self.change_id,
            "origin": self.origin,
            "commit_snapshot": self.commit_snapshot,
            "changes": {
                p: {"before": b, "after": a} for p, (b, a) in sorted(self.changes.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChangeSet":
        return cls(
            change_id=data["change_id"],
            origin=data["origin"],
            commit_snapshot=data["commit_snapshot"],
            changes={p: (v["before"], v["after"]) for p, v in data["changes"].items()},
        )


@dataclass(frozen=True)
class StressSignal:
    signal_id: str
    kind: str  # CHANGE or FORK_CHOICE
    changeset: ChangeSet
    new_line: str | None = None
    old_line: str | None = None

    def to_dict(self) -> dict:
        return {
            "signal_id": self.signal_id,
            "kind": self.kind,
            "changeset": self.changeset.to_dict(),
            "new_line": self.new_line,
            "old_line": self.old_line,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StressSignal":
        return cls(
            signal_id=data["signal_id"],
            kind=data["kind"],
            changeset=ChangeSet.from_dict(data["changeset"]),
            new_line=data.get("new_line"),
            old_line=data.get("old_line"),
        )


@dataclass(frozen=True)
class Resolution:
    decision: str
    decided_by: str = "local"
    merged: dict[str, str] | None = None  # path -> merged digest, for MERGE


@dataclass
class DeliveryRecord:
    signal_id: str
    bubble: str
    hops: tuple[str, ...]
    delivered_at: int
    status: str = "pending"
    decided_by: str | None = None
    decided_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "signal_id": self.signal_id,
            "bubble": self.bubble,
            "hops": list(self.hops),
            "delivered_at": self.delivered_at,
            "status": self.status,
            "decided_by": self.decided_by,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeliveryRecord":
        return cls(
            signal_id=data["signal_id"],
            bubble=data["bubble"],
            hops=tuple(data["hops"]),
            delivered_at=data["delivered_at"],
            status=data["status"],
            decided_by=data.get("decided_by"),
            decided_at=data.get("decided_at"),
        )


@dataclass
class PropagationOutcome:
    bubble: str
    signal_id: str
    decision: str
    forwarded_to: list[str] = field(default_factory=list)
    pins: list[str] = field(default_factory=list)
    fork_signals: list[str] = field(default_factory=list)
    reparented: tuple[str, str] | None = None


# ---------------------------------------------------------------------------
# operations


def commit(fed: Federation, bid: str, edits: dict[str, Binding | None],
           actor: str = "local") -> ChangeSet:
    """Apply edits to a bubble's local bindings and stress its dependents.

    The pre-commit resolution is snapshotted first (declines need the
    versions before the change), constraints are re-checked atomically,
    and a change signal is queued on every immediate structural dependent.
    A commit whose effective diff is empty sends nothing.
    """
    d = fed._require_active(bid)
    normalized: dict[str, Binding | None] = {}
    for path, binding in edits.items():
        if binding is not None and not isinstance(binding, Binding):
            binding = Binding.bound(binding)
        normalized[path] = binding
    fed._require_digests({p: b for p, b in normalized.items() if b is not None})

    pre_view = fed.resolve(bid)
    snapshot = fed.store.record_snapshot(
        bid, digest_map(pre_view), taken_at=fed.tick(), require_present=False
    )

    local = dict(d.local_bindings)
    for path, binding in normalized.items():
        path = validate_path(path)
        if binding is None:
            local.pop(path, None)
        else:
            local[path] = binding

    trial_desc = d.bumped(local_bindings=local)
    trial = dict(fed.descriptors)
    trial[bid] = trial_desc
    fed._check_constraints_or_raise(trial, bid)

    post = digest_map(resolve_view(trial, bid))
    pre = digest_map(pre_view)
    changes: dict[str, tuple[str | None, str | None]] = {}
    for path in sorted(set(pre) | set(post)):
        before, after = pre.get(path), post.get(path)
        if before != after:
            changes[path] = (before, after)

    if local != d.local_bindings:
        fed.publish(trial_desc)
        published = trial_desc
    else:
        published = d

    change_id = _short_hash("change", bid, str(published.seq), snapshot.snapshot_id)
    changeset = ChangeSet(change_id, bid, snapshot.snapshot_id, changes)
    fed.changesets[change_id] = changeset

    if changes:
        signal = StressSignal(change_id, CHANGE, changeset)
        fed.signals[change_id] = signal
        for dep in fed.dependents(bid):
            route_signal(fed, signal, dep, (bid,))
    return changeset


def route_signal(fed: Federation, signal: StressSignal, target: str,
                 hops: tuple[str, ...]) -> None:
    if fed.signal_router is not None:
        fed.signal_router(signal, target, hops)
    else:
        deliver_signal(fed, signal, target, hops)


def deliver_signal(fed: Federation, signal: StressSignal, target: str,
                   hops: tuple[str, ...]) -> bool:
    """Land a signal in a bubble's pending queue; idempotent per (signal, bubble)."""
    key = (signal.signal_id, target)
    if key in fed.deliveries:
        return False
    fed.signals.setdefault(signal.signal_id, signal)
    fed.deliveries[key] = DeliveryRecord(signal.signal_id, target, tuple(hops), fed.tick())
    d = fed.get(target)
    fed.publish(d.bumped(pending=d.pending + (signal.signal_id,)))
    if fed.on_delivery is not None:
        fed.on_delivery(target, signal)
    return True


def activate(fed: Federation, bid: str, actor: str = "local") -> list[StressSignal]:
    """Pending signals in arrival order; the queue is untouched until resolved."""
    d = fed.get(bid)
    return [fed.signals[sid] for sid in d.pending]


def resolve_signal(fed: Federation, bid: str, signal_id: str,
                   resolution: Resolution) -> PropagationOutcome:
    d = fed.get(bid)
    record = fed.deliveries.get((signal_id, bid))
    if signal_id not in d.pending or record is None or record.status != "pending":
        raise UnknownSignal(f"signal {signal_id} is not pending at {bid}")
    signal = fed.signals[signal_id]
    decision = resolution.decision
    outcome = PropagationOutcome(bid, signal_id, decision)

    if signal.kind == CHANGE:
        if decision not in (ACCEPT, DECLINE, MERGE):
            raise IllegalDecision(f"{decision} does not answer a change signal")
        _resolve_change(fed, d, signal, record, resolution, outcome)
    else:
        if decision not in (CHOOSE_NEW, CHOOSE_OLD):
            raise IllegalDecision(f"{decision} does not answer a fork choice")
        _resolve_fork(fed, d, signal, record, resolution, outcome)

    d = fed.get(bid)
    fed.publish(d.bumped(pending=tuple(s for s in d.pending if s != signal_id)))
    record.status = _STATUS[decision]
    record.decided_by = resolution.decided_by
    record.decided_at = fed.tick()
    fed.audit.append(AuditEntry(record.decided_at, signal_id, bid, decision,
                                resolution.decided_by))
    return outcome


_STATUS = {
    ACCEPT: "accepted",
    DECLINE: "declined",
    MERGE: "merged",
    CHOOSE_NEW: "chose_new",
    CHOOSE_OLD: "chose_old",
}


def _conflicted_paths(d, changeset: ChangeSet) -> list[str]:
    out = []
    for path in changeset.changes:
        binding = d.local_bindings.get(path)
        if binding is not None and not binding.is_tombstone:
            out.append(path)
    return sorted(out)


def _forward_change(fed: Federation, bid: str, signal: StressSignal,
                    record: DeliveryRecord, outcome: PropagationOutcome) -> None:
    for dep in fed.dependents(bid):
        route_signal(fed, signal, dep, record.hops + (bid,))
        outcome.forwarded_to.append(dep)


def _resolve_change(fed, d, signal, record, resolution, outcome) -> None:
    changeset = signal.changeset
    conflicted = _conflicted_paths(d, changeset)

    if resolution.decision == ACCEPT:
        if conflicted:
            raise IllegalDecision(
                f"{d.id} locally binds changed paths {conflicted[:3]}; merge required"
            )
        _forward_change(fed, d.id, signal, record, outcome)
        return

    if resolution.decision == MERGE:
        merged = resolution.merged or {}
        if set(merged) != set(conflicted):
            raise MergeIncomplete(
                f"merge map must cover exactly {conflicted}, got {sorted(merged)}"
            )
        fed._require_digests({p: Binding.bound(v) for p, v in merged.items()})
        if merged:
            fed.apply_bindings(d.id, {p: Binding.bound(v) for p, v in merged.items()})
        _forward_change(fed, d.id, signal, record, outcome)
        return

    # Decline: pin the pre-change versions between the decliner and the
    # parent(s) the changed elements arrive through, stop the change here,
    # and put every dependent at fork-choice stress.
    view = fed.resolve(d.id)
    groups: dict[str, dict[str, Binding]] = {}
    arrival = record.hops[-1]
    for path, (before, _after) in sorted(changeset.changes.items()):
        el = view.get(path)
        if el is not None and len(el.via) > 1 and el.via[1] in d.structural_parents:
            parent = el.via[1]
        else:
            parent = arrival
        binding = Binding.bound(before) if before is not None else Binding.tombstone()
        groups.setdefault(parent, {})[path] = binding

    if arrival in d.structural_parents and arrival not in groups:
        groups[arrival] = {
            path: (Binding.bound(before) if before is not None else Binding.tombstone())
            for path, (before, _after) in sorted(changeset.changes.items())
        }

    dependents_before = fed.dependents(d.id)
    for parent in [p for p in d.structural_parents if p in groups]:
        pin_id = _short_hash("pin", signal.signal_id, d.id, parent)
        name = f"{d.name}.pin"
        fed.insert_between(parent, d.id, name, groups[parent],
                           bubble_id=pin_id, internal=True)
        outcome.pins.append(pin_id)

    fork = StressSignal(
        _short_hash("fork", signal.signal_id, d.id), FORK_CHOICE, changeset,
        new_line=arrival, old_line=d.id,
    )
    if dependents_before:
        fed.signals[fork.signal_id] = fork
        outcome.fork_signals.append(fork.signal_id)
        for dep in dependents_before:
            route_signal(fed, fork, dep, record.hops + (d.id,))
            outcome.forwarded_to.append(dep)


def _resolve_fork(fed, d, signal, record, resolution, outcome) -> None:
    arrival = record.hops[-1]
    if arrival not in d.structural_parents:
        raise IllegalDecision(
            f"fork arrived via {arrival}, which is no longer a parent of {d.id}"
        )
    tip = signal.new_line if resolution.decision == CHOOSE_NEW else signal.old_line
    if tip != arrival:
        index = d.structural_parents.index(arrival)
        new_parents = splice_parents(d.structural_parents, index, [tip])
        trial = dict(fed.descriptors)
        trial[d.id] = d.bumped(structural_parents=new_parents)
        for parent in new_parents:
            if _walks_back_to(trial, parent, d.id, structural_edges):
                raise IllegalDecision(
                    f"re-parenting {d.id} onto {tip} would close a structural cycle"
                )
        fed.publish(trial[d.id])
        outcome.reparented = (arrival, tip)

    chose_new = resolution.decision == CHOOSE_NEW
    forwarded = StressSignal(
        _short_hash("fork", signal.signal_id, d.id), FORK_CHOICE, signal.changeset,
        new_line=d.id if chose_new else signal.new_line,
        old_line=d.id if not chose_new else signal.old_line,
    )
    dependents = fed.dependents(d.id)
    if dependents:
        fed.signals[forwarded.signal_id] = forwarded
        outcome.fork_signals.append(forwarded.signal_id)
        for dep in dependents:
            route_signal(fed, forwarded, dep, record.hops + (d.id,))
            outcome.forwarded_to.append(dep)


def propagation_trace(fed: Federation, changeset: ChangeSet) -> list[dict]:
    """Delivery and resolution status for every bubble a change concerns."""
    related = {
        sid for sid, s in fed.signals.items()
        if s.changeset.change_id == changeset.change_id
    }
    downstream = structural_descendants(fed.descriptors, changeset.origin)
    touched = {b for (sid, b) in fed.deliveries if sid in related}
    out = []
    for bubble in sorted(downstream | touched):
        records = [
            fed.deliveries[(sid, bubble)].to_dict()
            for sid in sorted(related)
            if (sid, bubble) in fed.deliveries
        ]
        records.sort(key=lambda r: r["delivered_at"])
        out.append({"bubble": bubble, "delivered": bool(records), "signals": records})
    return out


def structural_descendants(descriptors, origin: str) -> set[str]:
    out: set[str] = set()
    frontier = [origin]
    while frontier:
        node = frontier.pop()
        for d in descriptors.values():
            if node in d.structural_parents and d.id not in out:
                out.add(d.id)
                frontier.append(d.id)
    return out
