"""Independent oracles the engine is checked against.

``materialize`` resolves a bubble eagerly from the *exported* descriptor
dicts using a flat first-claim-wins scan, deliberately sharing no code with
the engine's overlay resolver. A claim is (path, digest-or-None, provider);
a None digest is a tombstone claiming absence. Claims are emitted in
precedence order: local bindings, then each embed's (already collapsed)
claims under its mount, then each structural parent's claims.
"""

from __future__ import annotations

import random

from bubblekit import Binding, Federation
from bubblekit.errors import BubbleError
import bubblekit.stress as stress


def _collapsed_claims(bubbles: dict, bid: str, memo: dict) -> list:
    if bid in memo:
        return memo[bid]
    d = bubbles[bid]
    raw = []
    for path in d["local_bindings"]:
        binding = d["local_bindings"][path]
        if binding["kind"] == "tombstone":
            raw.append((path, None, bid))
        else:
            raw.append((path, binding["digest"], bid))
    for mount, guest in d["embeds"]:
        for path, digest, provider in _collapsed_claims(bubbles, guest, memo):
            mounted = path if mount == "" else f"{mount}/{path}"
            raw.append((mounted, digest, provider))
    for parent in d["structural_parents"]:
        raw.extend(_collapsed_claims(bubbles, parent, memo))
    seen = set()
    collapsed = []
    for claim in raw:
        if claim[0] in seen:
            continue
        seen.add(claim[0])
        collapsed.append(claim)
    memo[bid] = collapsed
    return collapsed


def materialize(bubbles: dict, bid: str) -> dict[str, tuple[str, str]]:
    """path -> (digest, provider) for one bubble, eagerly computed."""
    return {
        path: (digest, provider)
        for path, digest, provider in _collapsed_claims(bubbles, bid, {})
        if digest is not None
    }


def materialize_all(bubbles: dict) -> dict[str, dict]:
    memo: dict = {}
    out = {}
    for bid, d in bubbles.items():
        if d["state"] == "destroyed":
            continue
        out[bid] = {
            path: (digest, provider)
            for path, digest, provider in _collapsed_claims(bubbles, bid, memo)
            if digest is not None
        }
    return out


def exported(fed: Federation) -> dict:
    return {bid: d.to_dict() for bid, d in fed.descriptors.items()}


def engine_views(fed: Federation) -> dict[str, dict]:
    out = {}
    for bid, d in fed.descriptors.items():
        if d.state.value == "destroyed":
            continue
        out[bid] = {p: (el.digest, el.provider) for p, el in fed.resolve(bid).items()}
    return out


def assert_matches_oracle(fed: Federation) -> None:
    assert engine_views(fed) == materialize_all(exported(fed))


def reachability(bubbles: dict, origin: str) -> set[str]:
    """Structural descendants of origin (independent BFS over exported dicts)."""
    children: dict[str, list[str]] = {}
    for bid, d in bubbles.items():
        for parent in d["structural_parents"]:
            children.setdefault(parent, []).append(bid)
    out: set[str] = set()
    frontier = [origin]
    while frontier:
        node = frontier.pop()
        for child in children.get(node, ()):
            if child not in out:
                out.add(child)
                frontier.append(child)
    return out


# ---------------------------------------------------------------------------
# random graph machinery for property tests

PATHS = [f"p{i}" for i in range(8)] + ["dir/a", "dir/b", "dir/deep/c"]


def seed_content(fed: Federation, rng: random.Random, n: int = 6) -> list[str]:
    return [fed.store.put_blob(f"content-{rng.randrange(10_000)}-{i}".encode()) for i in range(n)]


def random_op(fed: Federation, rng: random.Random, digests: list[str]) -> str | None:
    """Apply one random operation; invalid moves simply fail and are skipped."""
    live = [bid for bid, d in fed.descriptors.items() if d.state.value == "active"]
    choices = ["create", "derive", "clone", "commit", "embed", "insert",
               "retract", "dissolve", "tombstone"]
    op = rng.choice(choices)
    try:
        if op == "create" or not live:
            bindings = {rng.choice(PATHS): rng.choice(digests)
                        for _ in range(rng.randrange(3))}
            fed.create(f"b{len(fed.descriptors)}", bindings)
            return "create"
        target = rng.choice(live)
        if op == "derive":
            fed.derive(target, f"b{len(fed.descriptors)}")
        elif op == "clone":
            fed.clone(target, f"b{len(fed.descriptors)}")
        elif op == "commit":
            edits = {rng.choice(PATHS): Binding.bound(rng.choice(digests))
                     for _ in range(rng.randrange(1, 3))}
            stress.commit(fed, target, edits)
        elif op == "tombstone":
            stress.commit(fed, target, {rng.choice(PATHS): Binding.tombstone()})
        elif op == "embed":
            guest = rng.choice(live)
            mount = rng.choice(["", "lib", "vendor/x"])
            fed.embed(target, mount, guest)
        elif op == "insert":
            d = fed.get(target)
            if not d.structural_parents:
                return None
            upstream = rng.choice(d.structural_parents)
            bindings = {}
            if rng.random() < 0.5:
                bindings[rng.choice(PATHS)] = Binding.bound(rng.choice(digests))
            fed.insert_between(upstream, target, f"b{len(fed.descriptors)}", bindings)
        elif op == "retract":
            fed.retract(target)
        elif op == "dissolve":
            d = fed.get(target)
            if not d.structural_parents:
                return None
            fed.dissolve(target, rng.choice(d.structural_parents))
        return op
    except BubbleError:
        return None
