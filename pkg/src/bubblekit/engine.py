"""Public bubble operations over a federation of descriptors.

The federation is a single logical state machine: one writer mutates it,
readers may resolve/examine concurrently on the immutable descriptor
values. Resolution overlays namespaces with a fixed precedence:

    1. the bubble's own bound local bindings,
    2. embeds in list order, each guest resolved then mounted under its
       prefix (earlier embed wins a collision),
    3. structural parents in list order, recursively resolved (earlier
       parent wins).

A tombstone at any level hides that path from every lower-precedence
level, which is the only way an inherited element can be removed.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

from . import store as store_mod
from .errors import (
    BubbleError,
    ConstraintViolationError,
    DanglingDigest,
    DestroyedBubble,
    EmbedCycleError,
    FrozenBubble,
    HasDependents,
    InvalidState,
    NotAdjacent,
    NotDissolvable,
    NotRetractable,
    ParentDestroyed,
    RepositoryError,
    SourceDestroyed,
    StructuralCycle,
    UnknownBubble,
)
from .model import (
    FORBID_PATH,
    FORBID_PROVENANCE,
    REQUIRE_ATTRIBUTE,
    Binding,
    BubbleDescriptor,
    BubbleState,
    Constraint,
    ResolvedElement,
    Violation,
    canonical_bytes,
    canonical_json,
    combined_edges,
    glob_match,
    join_mount,
    validate,
    validate_mount,
    validate_path,
)

# ---------------------------------------------------------------------------
# namespace overlay resolution


def _claims(descriptors, bid, memo, trail):
    """Resolve one bubble to (elements, hidden-paths).

    ``hidden`` carries tombstoned paths downward so that later parents of a
    descendant cannot resurrect a removed element.
    """
    if bid in memo:
        return memo[bid]
    if bid in trail:
        # Guarded against by the cycle checks; a hard stop beats recursion death.
        raise EmbedCycleError(f"resolution cycle through {bid}")
    d = descriptors.get(bid)
    if d is None:
        raise UnknownBubble(f"no bubble {bid}")
    if d.state is BubbleState.DESTROYED:
        raise DestroyedBubble(f"bubble {bid} is destroyed")

    trail = trail | {bid}
    elements: dict[str, ResolvedElement] = {}
    hidden: set[str] = set()

    for path, binding in d.local_bindings.items():
        if binding.is_tombstone:
            hidden.add(path)
        else:
            elements[path] = ResolvedElement(path, binding.digest, bid, (bid,))

    for mount, guest in d.embeds:
        g_elements, g_hidden = _claims(descriptors, guest, memo, trail)
        for gpath, el in g_elements.items():
            path = join_mount(mount, gpath)
            if path in elements or path in hidden:
                continue
            elements[path] = ResolvedElement(path, el.digest, el.provider, (bid,) + el.via)
        for gpath in g_hidden:
            path = join_mount(mount, gpath)
            if path not in elements:
                hidden.add(path)

    for parent in d.structural_parents:
        p_elements, p_hidden = _claims(descriptors, parent, memo, trail)
        for path, el in p_elements.items():
            if path in elements or path in hidden:
                continue
            elements[path] = ResolvedElement(path, el.digest, el.provider, (bid,) + el.via)
        for path in p_hidden:
            if path not in elements:
                hidden.add(path)

    memo[bid] = (elements, hidden)
    return memo[bid]


def resolve_view(descriptors: dict[str, BubbleDescriptor], bid: str) -> dict[str, ResolvedElement]:
    elements, _ = _claims(descriptors, bid, {}, frozenset())
    return dict(elements)


def resolve_claims(descriptors, bid):
    """(elements, hidden) as exported to dependents; used by trial comparisons."""
    elements, hidden = _claims(descriptors, bid, {}, frozenset())
    return dict(elements), set(hidden)


def digest_map(view: dict[str, ResolvedElement]) -> dict[str, str]:
    return {path: el.digest for path, el in view.items()}


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class ConstraintViolationRecord:
    constraint: Constraint
    declared_by: str
    bubble: str
    paths: tuple[str, ...]
    detail: str

    def to_dict(self) -> dict:
        return {
            "constraint": self.constraint.to_dict(),
            "declared_by": self.declared_by,
            "bubble": self.bubble,
            "paths": list(self.paths),
            "detail": self.detail,
        }


def effective_constraints(descriptors, bid) -> list[tuple[str, Constraint]]:
    """Own constraints plus inherited ones, honoring each bubble's constraint cut.

    A constraint declared locally by a bubble in the heir's cut set is
    skipped, while constraints of deeper structural ancestors still apply.
    """
    memo: dict[str, list[tuple[str, Constraint]]] = {}

    def walk(b):
        if b in memo:
            return memo[b]
        d = descriptors[b]
        out = [(b, c) for c in d.constraints]
        seen = set((decl, c) for decl, c in out)
        for parent in d.structural_parents:
            if parent not in descriptors:
                continue
            for decl, c in walk(parent):
                if decl in d.constraint_cut:
                    continue
                if (decl, c) not in seen:
                    seen.add((decl, c))
                    out.append((decl, c))
        memo[b] = out
        return out

    return walk(bid)


def evaluate_constraints(
    descriptors, bid, view: dict[str, ResolvedElement] | None = None
) -> list[ConstraintViolationRecord]:
    if view is None:
        view = resolve_view(descriptors, bid)
    d = descriptors[bid]
    out: list[ConstraintViolationRecord] = []
    for declared_by, constraint in effective_constraints(descriptors, bid):
        if constraint.kind == FORBID_PROVENANCE:
            bad = tuple(sorted(p for p, el in view.items() if el.provider == constraint.bubble))
            if bad:
                out.append(
                    ConstraintViolationRecord(
                        constraint, declared_by, bid, bad,
                        f"elements provided by forbidden bubble {constraint.bubble}",
                    )
                )
        elif constraint.kind == FORBID_PATH:
            bad = tuple(sorted(p for p in view if glob_match(constraint.pattern, p)))
            if bad:
                out.append(
                    ConstraintViolationRecord(
                        constraint, declared_by, bid, bad,
                        f"paths match forbidden pattern {constraint.pattern!r}",
                    )
                )
        elif constraint.kind == REQUIRE_ATTRIBUTE:
            if d.attributes.get(constraint.key) != constraint.value:
                out.append(
                    ConstraintViolationRecord(
                        constraint, declared_by, bid, (),
                        f"attribute {constraint.key!r} is "
                        f"{d.attributes.get(constraint.key)!r}, required {constraint.value!r}",
                    )
                )
    return out


# ---------------------------------------------------------------------------
# ancestry reports


@dataclass(frozen=True)
class AncestryEntry:
    src: str
    dst: str
    kind: str  # structural | historical | embed
    mount: str | None
    contributed: tuple[str, ...]

    def to_dict(self) -> dict:
        out = {"src": self.src, "dst": self.dst, "kind": self.kind,
               "contributed": list(self.contributed)}
        if self.mount is not None:
            out["mount"] = self.mount
        return out


@dataclass
class AncestryReport:
    target: str
    entries: list[AncestryEntry]
    embed_collisions: list[tuple[str, str, str]]  # (path, winning guest, shadowed guest)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "entries": [e.to_dict() for e in self.entries],
            "embed_collisions": [list(c) for c in self.embed_collisions],
        }


# ---------------------------------------------------------------------------
# the federation


def _random_id() -> str:
    return os.urandom(16).hex()


@dataclass
class AuditEntry:
    at: int
    signal_id: str
    bubble: str
    decision: str
    actor: str

    def line(self) -> str:
        return f"{self.at} {self.signal_id} {self.bubble} {self.decision} {self.actor}"


def splice_parents(parents: tuple[str, ...], index: int, replacement) -> tuple[str, ...]:
    """Replace the entry at ``index`` by ``replacement`` (a sequence),
    deduplicating while preserving first occurrence order."""
    out: list[str] = []
    for i, entry in enumerate(parents):
        items = list(replacement) if i == index else [entry]
        for item in items:
            if item not in out:
                out.append(item)
    return tuple(out)


class Federation:
    """All descriptors plus the store handle and the logical clock."""

    def __init__(self, store=None, id_source=None):
        self.store = store if store is not None else store_mod.MemoryResourceStore()
        self.descriptors: dict[str, BubbleDescriptor] = {}
        self.histories: dict[str, list[str]] = {}
        self.clock = 0
        # stress bookkeeping (populated by the stress module)
        self.signals: dict[str, object] = {}
        self.deliveries: dict[tuple[str, str], object] = {}
        self.changesets: dict[str, object] = {}
        self.audit: list[AuditEntry] = []
        self.sync_conflicts: list[dict] = []
        # hooks
        self.id_source = id_source or _random_id
        self.on_publish = None  # called with the new descriptor after a local mutation
        self.on_delivery = None  # called with (bubble id, signal) after a signal lands
        self.signal_router = None  # overrides local delivery (multi-governor mode)
        self.digest_known = None  # overrides the local-store digest presence check
        self._write_lock = threading.RLock()

    # -- plumbing -----------------------------------------------------------

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def new_id(self) -> str:
        while True:
            bid = self.id_source()
            if bid not in self.descriptors:
                return bid

    def get(self, bid: str) -> BubbleDescriptor:
        try:
            return self.descriptors[bid]
        except KeyError:
            raise UnknownBubble(f"no bubble {bid}") from None

    def has(self, bid: str) -> bool:
        return bid in self.descriptors

    def _known(self, digest: str) -> bool:
        if self.digest_known is not None:
            return self.digest_known(digest)
        return self.store.has_blob(digest)

    def _require_digests(self, bindings: dict[str, Binding]) -> None:
        missing = sorted(
            b.digest for b in bindings.values() if not b.is_tombstone and not self._known(b.digest)
        )
        if missing:
            raise DanglingDigest(f"unknown digests: {missing[:3]}")

    def publish(self, descriptor: BubbleDescriptor) -> None:
        with self._write_lock:
            self.descriptors[descriptor.id] = descriptor
            self.histories.setdefault(descriptor.id, []).append(
                store_mod.hash_bytes(canonical_bytes(descriptor))
            )
        if self.on_publish is not None:
            self.on_publish(descriptor)

    def adopt_replica(self, descriptor: BubbleDescriptor, history: list[str]) -> None:
        """Install a descriptor synced from its owning governor (no publish hook)."""
        with self._write_lock:
            self.descriptors[descriptor.id] = descriptor
            self.histories[descriptor.id] = list(history)

    def dependents(self, bid: str) -> list[str]:
        return sorted(
            d.id for d in self.descriptors.values() if bid in d.structural_parents
        )

    def embedders(self, bid: str) -> list[str]:
        return sorted(
            d.id for d in self.descriptors.values() if any(g == bid for _, g in d.embeds)
        )

    def _require_active(self, bid: str) -> BubbleDescriptor:
        d = self.get(bid)
        if d.state is BubbleState.FROZEN:
            raise FrozenBubble(f"bubble {bid} is frozen")
        if d.state is not BubbleState.ACTIVE:
            raise InvalidState(f"bubble {bid} is {d.state.value}")
        return d

    def _check_constraints_or_raise(self, descriptors, bid) -> None:
        violations = evaluate_constraints(descriptors, bid)
        if violations:
            raise ConstraintViolationError(
                "; ".join(v.detail for v in violations), violations
            )

    def _snapshot_of(self, bid: str) -> store_mod.SnapshotRecord:
        entries = digest_map(self.resolve(bid))
        return self.store.record_snapshot(bid, entries, taken_at=self.tick(), require_present=False)

    # -- reads --------------------------------------------------------------

    def resolve(self, bid: str) -> dict[str, ResolvedElement]:
        d = self.get(bid)
        if d.state is BubbleState.DESTROYED:
            raise DestroyedBubble(f"bubble {bid} is destroyed")
        return resolve_view(self.descriptors, bid)

    def examine(self, bid: str) -> AncestryReport:
        d = self.get(bid)
        by_provider: dict[str, list[str]] = {}
        if d.state is not BubbleState.DESTROYED:
            for path, el in self.resolve(bid).items():
                by_provider.setdefault(el.provider, []).append(path)

        entries: list[AncestryEntry] = []
        visited: set[str] = set()

        def contributed(node: str) -> tuple[str, ...]:
            return tuple(sorted(by_provider.get(node, ())))

        def walk(node: str) -> None:
            if node in visited or node not in self.descriptors:
                return
            visited.add(node)
            nd = self.descriptors[node]
            for parent in nd.structural_parents:
                entries.append(AncestryEntry(node, parent, "structural", None, contributed(parent)))
                walk(parent)
            for mount, guest in nd.embeds:
                entries.append(AncestryEntry(node, guest, "embed", mount, contributed(guest)))
                walk(guest)
            for origin in nd.historical_origins:
                entries.append(AncestryEntry(node, origin, "historical", None, ()))

        walk(bid)

        collisions: list[tuple[str, str, str]] = []
        if d.state is not BubbleState.DESTROYED:
            claimed: dict[str, str] = {}
            for mount, guest in d.embeds:
                g_elements, g_hidden = resolve_claims(self.descriptors, guest)
                for gpath in sorted(set(g_elements) | g_hidden):
                    path = join_mount(mount, gpath)
                    if path in claimed:
                        collisions.append((path, claimed[path], guest))
                    else:
                        claimed[path] = guest
        return AncestryReport(bid, entries, collisions)

    def check_constraints(self, bid: str) -> list[ConstraintViolationRecord]:
        self.get(bid)
        return evaluate_constraints(self.descriptors, bid)

    def validate_bubble(self, bid: str) -> list[Violation]:
        return validate(self.get(bid), self.descriptors)

    def validate_all(self) -> list[Violation]:
        out = []
        for bid in sorted(self.descriptors):
            out.extend(validate(self.descriptors[bid], self.descriptors))
        return out

    # -- lifecycle operations -------------------------------------------------

    def create(self, name: str, bindings: dict[str, str] | None = None, *,
               attributes: dict[str, str] | None = None, bubble_id: str | None = None) -> str:
        bindings = bindings or {}
        local = {validate_path(p): Binding.bound(d) for p, d in bindings.items()}
        self._require_digests(local)
        bid = bubble_id or self.new_id()
        if bid in self.descriptors:
            raise RepositoryError(f"bubble id {bid} already exists")
        descriptor = BubbleDescriptor(
            id=bid, name=name, local_bindings=local,
            attributes=dict(attributes or {}),
        )
        self.publish(descriptor)
        self._snapshot_of(bid)
        return bid

    def derive(self, parent: str, name: str, *, attributes: dict[str, str] | None = None,
               bubble_id: str | None = None) -> str:
        p = self.get(parent)
        if p.state is BubbleState.DESTROYED:
            raise ParentDestroyed(f"parent {parent} is destroyed")
        if p.state not in (BubbleState.ACTIVE, BubbleState.FROZEN):
            raise InvalidState(f"parent {parent} is {p.state.value}")
        bid = bubble_id or self.new_id()
        if bid in self.descriptors:
            raise RepositoryError(f"bubble id {bid} already exists")
        descriptor = BubbleDescriptor(
            id=bid, name=name, structural_parents=(parent,),
            attributes=dict(attributes or {}),
        )
        trial = dict(self.descriptors)
        trial[bid] = descriptor
        self._check_constraints_or_raise(trial, bid)
        self.publish(descriptor)
        return bid

    def clone(self, source: str, name: str, *, attributes: dict[str, str] | None = None,
              bubble_id: str | None = None) -> str:
        s = self.get(source)
        if s.state is BubbleState.DESTROYED:
            raise SourceDestroyed(f"source {source} is destroyed")
        if s.state not in (BubbleState.ACTIVE, BubbleState.FROZEN):
            raise InvalidState(f"source {source} is {s.state.value}")
        bid = bubble_id or self.new_id()
        if bid in self.descriptors:
            raise RepositoryError(f"bubble id {bid} already exists")
        descriptor = BubbleDescriptor(
            id=bid, name=name,
            structural_parents=(source,),
            historical_origins=(source,),
            constraint_cut=frozenset({source}),
            attributes=dict(attributes or {}),
        )
        trial = dict(self.descriptors)
        trial[bid] = descriptor
        self._check_constraints_or_raise(trial, bid)
        self.publish(descriptor)
        return bid

    def dissolve(self, bid: str, source: str) -> None:
        d = self._require_active(bid)
        if source not in d.structural_parents:
            raise NotDissolvable(f"{source} is not a structural parent of {bid}")
        src = self.get(source)
        view = self.resolve(bid)
        still = sorted(p for p, el in view.items() if el.provider == source)
        if still:
            raise NotDissolvable(
                f"{source} still provides {still[:5]} to {bid}"
            )
        index = d.structural_parents.index(source)
        new_parents = splice_parents(d.structural_parents, index, src.structural_parents)
        trial_desc = d.bumped(structural_parents=new_parents)
        trial = dict(self.descriptors)
        trial[bid] = trial_desc
        if _claim_signature(self.descriptors, bid) != _claim_signature(trial, bid):
            raise NotDissolvable(
                f"removing the edge {bid}->{source} would change the resolved view"
            )
        self.publish(trial_desc)

    def embed(self, host: str, mount: str, guest: str) -> None:
        d = self._require_active(host)
        g = self.get(guest)
        if g.state is BubbleState.DESTROYED:
            raise InvalidState(f"guest {guest} is destroyed")
        mount = validate_mount(mount)
        # Resolution traverses parents and embeds alike, so the cycle check
        # walks the combined graph.
        if guest == host or _reachable(self.descriptors, guest, host):
            raise EmbedCycleError(f"embedding {guest} into {host} would close a cycle")
        trial_desc = d.bumped(embeds=d.embeds + ((mount, guest),))
        trial = dict(self.descriptors)
        trial[host] = trial_desc
        self._check_constraints_or_raise(trial, host)
        self.publish(trial_desc)

    def insert_between(self, upstream: str, downstream: str, name: str,
                       bindings: dict[str, Binding] | None = None, *,
                       bubble_id: str | None = None, internal: bool = False) -> str:
        down = self._require_active(downstream)
        if upstream not in down.structural_parents:
            raise NotAdjacent(f"{upstream} is not a structural parent of {downstream}")
        local = {}
        for path, binding in (bindings or {}).items():
            if not isinstance(binding, Binding):
                binding = Binding.bound(binding)
            local[validate_path(path)] = binding
        if not internal:
            self._require_digests(local)
        bid = bubble_id or self.new_id()
        if bid in self.descriptors:
            raise RepositoryError(f"bubble id {bid} already exists")
        node = BubbleDescriptor(
            id=bid, name=name, local_bindings=local, structural_parents=(upstream,)
        )
        index = down.structural_parents.index(upstream)
        self.publish(node)
        self.publish(down.bumped(structural_parents=splice_parents(down.structural_parents, index, [bid])))
        return bid

    def retract(self, bid: str) -> None:
        d = self._require_active(bid)
        embedders = [e for e in self.embedders(bid)
                     if self.descriptors[e].state in (BubbleState.ACTIVE, BubbleState.FROZEN)]
        if embedders:
            raise NotRetractable(f"{bid} is embedded by {embedders[:3]}")
        dependents = self.dependents(bid)
        trial = dict(self.descriptors)
        for dep in dependents:
            dd = trial[dep]
            index = dd.structural_parents.index(bid)
            trial[dep] = dd.bumped(
                structural_parents=splice_parents(dd.structural_parents, index, d.structural_parents)
            )
        for other in self.descriptors:
            if self.descriptors[other].state is BubbleState.DESTROYED:
                continue
            if other == bid:
                continue
            if _claim_signature(self.descriptors, other) != _claim_signature(trial, other):
                raise NotRetractable(
                    f"retracting {bid} would change the resolved view of {other}"
                )
        for dep in dependents:
            self.publish(trial[dep])
        self.publish(d.bumped(state=BubbleState.RETRACTED))

    def freeze(self, bid: str) -> store_mod.SnapshotRecord:
        d = self._require_active(bid)
        record = self._snapshot_of(bid)
        self.publish(d.bumped(state=BubbleState.FROZEN))
        return record

    def destroy(self, bid: str) -> None:
        d = self.get(bid)
        if d.state is BubbleState.DESTROYED:
            return
        holders = [
            x for x in self.dependents(bid) + self.embedders(bid)
            if self.descriptors[x].state in (BubbleState.ACTIVE, BubbleState.FROZEN)
        ]
        if holders:
            raise HasDependents(f"{bid} is referenced by {sorted(set(holders))[:3]}")
        self.publish(d.bumped(state=BubbleState.DESTROYED))

    # -- maintenance ----------------------------------------------------------

    def add_constraint(self, bid: str, constraint: Constraint) -> None:
        d = self._require_active(bid)
        self.publish(d.bumped(constraints=d.constraints + (constraint,)))

    def set_attribute(self, bid: str, key: str, value: str) -> None:
        d = self._require_active(bid)
        attrs = dict(d.attributes)
        attrs[key] = value
        self.publish(d.bumped(attributes=attrs))

    def apply_bindings(self, bid: str, edits: dict[str, Binding | None]) -> BubbleDescriptor:
        """Raw binding mutation used by commit/merge; no signalling here."""
        d = self._require_active(bid)
        local = dict(d.local_bindings)
        for path, binding in edits.items():
            path = validate_path(path)
            if binding is None:
                local.pop(path, None)
            else:
                local[path] = binding
        new = d.bumped(local_bindings=local)
        self.publish(new)
        return new

    def gc_roots(self) -> set[str]:
        """Live roots for an explicit gc run: every snapshot, every bound
        digest, and every digest a retained changeset still mentions."""
        roots: set[str] = set(self.store.list_snapshots())
        for d in self.descriptors.values():
            for binding in d.local_bindings.values():
                if not binding.is_tombstone:
                    roots.add(binding.digest)
        for cs in self.changesets.values():
            for before, after in cs.changes.values():
                if before:
                    roots.add(before)
                if after:
                    roots.add(after)
        return roots

    # -- exports ----------------------------------------------------------------

    def export_json(self) -> bytes:
        return canonical_json(
            {"format": 1, "bubbles": {bid: self.descriptors[bid].to_dict()
                                      for bid in sorted(self.descriptors)}}
        )

    def export_dot(self) -> str:
        lines = ["digraph bubbles {", "  node [shape=box];"]
        for bid in sorted(self.descriptors):
            d = self.descriptors[bid]
            lines.append(f'  "{bid}" [label="{d.name}\\n{d.state.value}"];')
        edges = []
        for bid in sorted(self.descriptors):
            d = self.descriptors[bid]
            for parent in d.structural_parents:
                edges.append(f'  "{bid}" -> "{parent}" [style=solid];')
            for origin in d.historical_origins:
                edges.append(f'  "{bid}" -> "{origin}" [style=dashed];')
            for mount, guest in d.embeds:
                edges.append(f'  "{bid}" -> "{guest}" [style=dotted, label="{mount}"];')
        lines.extend(edges)
        lines.append("}")
        return "\n".join(lines) + "\n"

    def stats(self) -> dict:
        by_state: dict[str, int] = {}
        for d in self.descriptors.values():
            by_state[d.state.value] = by_state.get(d.state.value, 0) + 1
        return {
            "bubbles": len(self.descriptors),
            "by_state": dict(sorted(by_state.items())),
            "blobs": self.store.blob_count(),
            "snapshots": len(self.store.list_snapshots()),
            "signals": len(self.signals),
            "pending": sum(len(d.pending) for d in self.descriptors.values()),
            "clock": self.clock,
        }


def _reachable(descriptors, start: str, target: str) -> bool:
    seen = set()
    stack = [start]
    while stack:
        node = stack.pop()
        if node == target:
            return True
        if node in seen or node not in descriptors:
            continue
        seen.add(node)
        stack.extend(combined_edges(descriptors[node]))
    return False


def _claim_signature(descriptors, bid):
    try:
        elements, hidden = resolve_claims(descriptors, bid)
    except DestroyedBubble:
        return ("destroyed",)
    return (
        {path: (el.digest, el.provider) for path, el in elements.items()},
        frozenset(hidden),
    )
