"""Bubble descriptors and their validation.

A bubble is a logical container over design elements. It holds local
bindings (including tombstones that hide inherited paths), an ordered list
of structural parents that drive resolution, documentation-only historical
origins, embeds that mount other bubbles under a path prefix, and explicit
constraints.

Descriptors are immutable values: every mutation produces a new descriptor
with an incremented ``seq``, so they can be shared freely across threads
and synced between governors by comparing canonical bytes.
"""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import BadPath
from .store import is_digest

# ---------------------------------------------------------------------------
# logical paths

_FORBIDDEN_SEGMENTS = {"", ".", ".."}


def validate_path(path: str) -> str:
    """Paths are /-separated UTF-8 segments; no empty, '.' or '..' segments."""
    if not isinstance(path, str) or not path:
        raise BadPath(f"invalid path {path!r}")
    for segment in path.split("/"):
        if segment in _FORBIDDEN_SEGMENTS:
            raise BadPath(f"invalid path {path!r}")
    return path


def validate_mount(mount: str) -> str:
    """A mount prefix is a path or the empty string (mount at the root).

    A single trailing slash is tolerated and stripped ("lib/" mounts at "lib").
    """
    if mount == "":
        return mount
    if mount.endswith("/"):
        mount = mount[:-1]
    return validate_path(mount)


def join_mount(mount: str, path: str) -> str:
    return path if mount == "" else f"{mount}/{path}"


@functools.lru_cache(maxsize=512)
def glob_regex(pattern: str) -> re.Pattern:
    """Translate a path glob: '*' and '?' stay within a segment, '**' crosses them."""
    out = []
    i = 0
    while i < len(pattern):
        c = pattern[i]
        if c == "*":
            if pattern[i : i + 2] == "**":
                out.append(".*")
                i += 2
            else:
                out.append("[^/]*")
                i += 1
        elif c == "?":
            out.append("[^/]")
            i += 1
        else:
            out.append(re.escape(c))
            i += 1
    return re.compile("^" + "".join(out) + "$")


def glob_match(pattern: str, path: str) -> bool:
    return glob_regex(pattern).match(path) is not None


# ---------------------------------------------------------------------------
# bindings and constraints


@dataclass(frozen=True)
class Binding:
    """A local binding: either a bound digest or a tombstone hiding the path."""

    digest: str | None

    @classmethod
    def bound(cls, digest: str) -> "Binding":
        return cls(digest)

    @classmethod
    def tombstone(cls) -> "Binding":
        return cls(None)

    @property
    def is_tombstone(self) -> bool:
        return self.digest is None

    def to_dict(self) -> dict:
        if self.is_tombstone:
            return {"kind": "tombstone"}
        return {"kind": "bound", "digest": self.digest}

    @classmethod
    def from_dict(cls, data: dict) -> "Binding":
        if data.get("kind") == "tombstone":
            return cls.tombstone()
        return cls.bound(data["digest"])


FORBID_PROVENANCE = "forbid_provenance"
FORBID_PATH = "forbid_path"
REQUIRE_ATTRIBUTE = "require_attribute"


@dataclass(frozen=True)
class Constraint:
    kind: str
    bubble: str | None = None
    pattern: str | None = None
    key: str | None = None
    value: str | None = None

    @classmethod
    def forbid_provenance(cls, bubble: str) -> "Constraint":
        return cls(FORBID_PROVENANCE, bubble=bubble)

    @classmethod
    def forbid_path(cls, pattern: str) -> "Constraint":
        return cls(FORBID_PATH, pattern=pattern)

    @classmethod
    def require_attribute(cls, key: str, value: str) -> "Constraint":
        return cls(REQUIRE_ATTRIBUTE, key=key, value=value)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == FORBID_PROVENANCE:
            out["bubble"] = self.bubble
        elif self.kind == FORBID_PATH:
            out["pattern"] = self.pattern
        else:
            out["key"] = self.key
            out["value"] = self.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Constraint":
        kind = data["kind"]
        if kind == FORBID_PROVENANCE:
            return cls.forbid_provenance(data["bubble"])
        if kind == FORBID_PATH:
            return cls.forbid_path(data["pattern"])
        if kind == REQUIRE_ATTRIBUTE:
            return cls.require_attribute(data["key"], data["value"])
        raise ValueError(f"unknown constraint kind {kind!r}")

    def describe(self) -> str:
        if self.kind == FORBID_PROVENANCE:
            return f"forbid-provenance({self.bubble})"
        if self.kind == FORBID_PATH:
            return f"forbid-path({self.pattern})"
        return f"require-attribute({self.key}={self.value})"


# ---------------------------------------------------------------------------
# descriptor


class BubbleState(str, Enum):
    ACTIVE = "active"
    FROZEN = "frozen"
    RETRACTED = "retracted"
    DESTROYED = "destroyed"


@dataclass(frozen=True)
class BubbleDescriptor:
    id: str
    name: str
    local_bindings: dict[str, Binding] = field(default_factory=dict)
    structural_parents: tuple[str, ...] = ()
    historical_origins: tuple[str, ...] = ()
    embeds: tuple[tuple[str, str], ...] = ()  # (mount prefix, bubble id)
    constraints: tuple[Constraint, ...] = ()
    constraint_cut: frozenset[str] = frozenset()
    attributes: dict[str, str] = field(default_factory=dict)
    state: BubbleState = BubbleState.ACTIVE
    seq: int = 1
    pending: tuple[str, ...] = ()

    def bumped(self, **changes) -> "BubbleDescriptor":
        """A copy with the given changes and seq incremented."""
        return replace(self, seq=self.seq + 1, **changes)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "local_bindings": {p: b.to_dict() for p, b in self.local_bindings.items()},
            "structural_parents": list(self.structural_parents),
            "historical_origins": list(self.historical_origins),
            "embeds": [[mount, guest] for mount, guest in self.embeds],
            "constraints": [c.to_dict() for c in self.constraints],
            "constraint_cut": sorted(self.constraint_cut),
            "attributes": dict(self.attributes),
            "state": self.state.value,
            "seq": self.seq,
            "pending": list(self.pending),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BubbleDescriptor":
        return cls(
            id=data["id"],
            name=data["name"],
            local_bindings={p: Binding.from_dict(b) for p, b in data["local_bindings"].items()},
            structural_parents=tuple(data["structural_parents"]),
            historical_origins=tuple(data["historical_origins"]),
            embeds=tuple((m, g) for m, g in data["embeds"]),
            constraints=tuple(Constraint.from_dict(c) for c in data["constraints"]),
            constraint_cut=frozenset(data["constraint_cut"]),
            attributes=dict(data["attributes"]),
            state=BubbleState(data["state"]),
            seq=data["seq"],
            pending=tuple(data["pending"]),
        )


def canonical_json(obj) -> bytes:
    """Deterministic JSON: sorted keys, compact separators, ASCII escapes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def canonical_bytes(descriptor: BubbleDescriptor) -> bytes:
    return canonical_json(descriptor.to_dict())


@dataclass(frozen=True)
class ResolvedElement:
    """One element of a resolved view: where a path's content comes from.

    ``provider`` is the bubble whose local binding supplied the digest;
    ``via`` is the inheritance chain walked from the resolved bubble down
    to the provider (so provider is always the last entry).
    """

    path: str
    digest: str
    provider: str
    via: tuple[str, ...]


# ---------------------------------------------------------------------------
# static validation


@dataclass(frozen=True)
class Violation:
    code: str
    bubble: str
    detail: str


def _walks_back_to(universe: dict[str, BubbleDescriptor], start: str, target: str, edges) -> bool:
    seen = set()
    stack = [start]
    while stack:
        node = stack.pop()
        if node == target:
            return True
        if node in seen or node not in universe:
            continue
        seen.add(node)
        stack.extend(edges(universe[node]))
    return False


def structural_edges(d: BubbleDescriptor):
    return d.structural_parents


def combined_edges(d: BubbleDescriptor):
    return list(d.structural_parents) + [guest for _, guest in d.embeds]


def validate(descriptor: BubbleDescriptor, universe: dict[str, BubbleDescriptor]) -> list[Violation]:
    """Every invariant violation of one descriptor against the federation.

    Violations are data, not errors; engine operations use the same checks
    to reject mutations up front.
    """
    out: list[Violation] = []
    d = descriptor
    strict_refs = d.state in (BubbleState.ACTIVE, BubbleState.FROZEN)

    for path in d.local_bindings:
        try:
            validate_path(path)
        except BadPath:
            out.append(Violation("BAD_PATH", d.id, f"binding path {path!r}"))
    for mount, _ in d.embeds:
        if mount != "":
            try:
                validate_path(mount)
            except BadPath:
                out.append(Violation("BAD_PATH", d.id, f"embed mount {mount!r}"))

    for parent in d.structural_parents:
        if parent not in universe:
            out.append(Violation("DANGLING_PARENT", d.id, f"parent {parent} unknown"))
        elif strict_refs and universe[parent].state is BubbleState.DESTROYED:
            out.append(Violation("DESTROYED_REF", d.id, f"parent {parent} is destroyed"))
    for _, guest in d.embeds:
        if guest not in universe:
            out.append(Violation("DANGLING_EMBED", d.id, f"guest {guest} unknown"))
        elif strict_refs and universe[guest].state is BubbleState.DESTROYED:
            out.append(Violation("DESTROYED_REF", d.id, f"guest {guest} is destroyed"))
    for origin in d.historical_origins:
        if origin not in universe:
            out.append(Violation("DANGLING_HISTORICAL", d.id, f"origin {origin} unknown"))

    for parent in d.structural_parents:
        if parent in universe and _walks_back_to(universe, parent, d.id, structural_edges):
            out.append(Violation("STRUCTURAL_CYCLE", d.id, f"via parent {parent}"))
    for _, guest in d.embeds:
        if guest in universe and _walks_back_to(universe, guest, d.id, combined_edges):
            out.append(Violation("EMBED_CYCLE", d.id, f"via guest {guest}"))

    if d.seq < 1:
        out.append(Violation("BAD_SEQ", d.id, f"seq {d.seq}"))
    if len(set(d.structural_parents)) != len(d.structural_parents):
        out.append(Violation("DUPLICATE_PARENT", d.id, "parent list has duplicates"))
    return out
