"""Distributed operation: governors, envelopes and a simulated network.

Each bubble is owned by exactly one governor. Owners hold the
authoritative descriptor and broadcast it to every peer after each local
mutation; peers keep replicas so that commits can find dependents owned
elsewhere. Signals are routed to the owner of their target bubble and
retried until acknowledged; blobs are fetched on demand and verified
against their digest on receipt.

The transport is a logical-tick simulation: given the same seed and the
same inputs it produces the identical delivery schedule, so distributed
scenarios replay deterministically. Messages may be delayed, dropped,
duplicated or cut off by partition windows; the reliability layer
(retransmit until ack, receiver-side dedup by message id) makes delivery
at-least-once outside permanent partitions.
"""

from __future__ import annotations

import base64
import json
import random
import struct
from dataclasses import dataclass, field

from .engine import Federation
from .errors import TimedOut, UnknownGovernor
from .model import BubbleDescriptor, canonical_json
from .store import hash_bytes
from .stress import StressSignal, deliver_signal

SIGNAL_DELIVER = "signal_deliver"
ACK = "ack"
BLOB_REQUEST = "blob_request"
BLOB_REPLY = "blob_reply"
SYNC_STATE = "sync_state"

RELIABLE_KINDS = (SIGNAL_DELIVER, SYNC_STATE)


@dataclass(frozen=True)
class Envelope:
    msg_id: str
    frm: str
    to: str
    kind: str
    payload: dict
    sent_at: int

    def to_dict(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "from": self.frm,
            "to": self.to,
            "kind": self.kind,
            "payload": self.payload,
            "sent_at": self.sent_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Envelope":
        return cls(data["msg_id"], data["from"], data["to"], data["kind"],
                   data["payload"], data["sent_at"])


def encode_envelope(env: Envelope) -> bytes:
    body = canonical_json(env.to_dict())
    return struct.pack(">I", len(body)) + body


def decode_envelope(raw: bytes) -> Envelope:
    (length,) = struct.unpack(">I", raw[:4])
    body = raw[4 : 4 + length]
    if len(body) != length:
        raise ValueError("truncated envelope")
    return Envelope.from_dict(json.loads(body.decode("ascii")))


@dataclass(frozen=True)
class PartitionWindow:
    start: int
    end: int  # exclusive
    pair: frozenset[str]


@dataclass
class TransportContract:
    seed: int = 0
    latency: tuple[int, int] = (1, 5)
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    retry_interval: int = 12
    partitions: tuple[PartitionWindow, ...] = ()

    def __post_init__(self):
        lo, hi = self.latency
        if lo < 1 or hi < lo:
            raise ValueError("latency range must satisfy 1 <= min <= max")


class SimulatedTransport:
    """Seeded in-memory network; all randomness comes from the contract seed."""

    def __init__(self, contract: TransportContract, governor_ids):
        self.contract = contract
        self.governors = sorted(governor_ids)
        self.rng = random.Random(contract.seed)
        self.now = 0
        self._seq = 0
        self.in_flight: list[tuple[int, int, str, bytes]] = []  # (deliver_at, seq, to, raw)
        self.corruptor = None  # test hook: fn(kind, raw) -> raw
        self.sent = 0
        self.dropped = 0

    def partitioned(self, a: str, b: str, at: int) -> bool:
        pair = frozenset((a, b))
        return any(w.start <= at < w.end and w.pair == pair for w in self.contract.partitions)

    def post(self, env: Envelope) -> bool:
        if env.to not in self.governors:
            raise UnknownGovernor(f"no governor {env.to}")
        self.sent += 1
        if self.partitioned(env.frm, env.to, self.now):
            self.dropped += 1
            return False
        if self.rng.random() < self.contract.drop_probability:
            self.dropped += 1
            return False
        raw = encode_envelope(env)
        if self.corruptor is not None:
            raw = self.corruptor(env.kind, raw)
        copies = 2 if self.rng.random() < self.contract.duplicate_probability else 1
        lo, hi = self.contract.latency
        for _ in range(copies):
            self._seq += 1
            self.in_flight.append((self.now + self.rng.randint(lo, hi), self._seq, env.to, raw))
        return True

    def advance(self) -> list[tuple[str, bytes]]:
        """Move one tick forward and return (governor, raw envelope) deliveries."""
        self.now += 1
        due = sorted((e for e in self.in_flight if e[0] <= self.now),
                     key=lambda e: (e[0], e[1]))
        remaining = [e for e in self.in_flight if e[0] > self.now]
        self.in_flight = remaining
        return [(to, raw) for (_, _, to, raw) in due]


class Governor:
    """One governor: an event loop over envelopes plus its owned federation view."""

    def __init__(self, gid: str, fed: Federation, ownership: dict[str, str] | None = None):
        self.gid = gid
        self.fed = fed
        self.ownership: dict[str, str] = dict(ownership or {})
        self.peers: list[str] = []
        self.transport: SimulatedTransport | None = None
        self.inbox: list[Envelope] = []
        self.seen_msg_ids: set[str] = set()
        self.known_digests: set[str] = set()
        self._msg_counter = 0
        self._unacked: dict[str, tuple[Envelope, int]] = {}
        self._blob_waits: dict[str, dict] = {}  # digest -> {frm, next_retry, attempts}
        self.fetch_errors: list[dict] = []
        self._applying_sync = False
        fed.on_publish = self._on_publish
        fed.signal_router = self._route_signal
        fed.digest_known = lambda d: fed.store.has_blob(d) or d in self.known_digests

    # -- wiring ---------------------------------------------------------------

    def attach(self, transport: SimulatedTransport, peers) -> None:
        self.transport = transport
        self.peers = sorted(p for p in peers if p != self.gid)

    def owner_of(self, bid: str) -> str:
        return self.ownership.get(bid, self.gid)

    def _next_msg_id(self) -> str:
        self._msg_counter += 1
        return f"{self.gid}:{self._msg_counter}"

    def _send(self, to: str, kind: str, payload: dict) -> Envelope:
        env = Envelope(self._next_msg_id(), self.gid, to, kind, payload,
                       self.transport.now)
        if kind in RELIABLE_KINDS:
            self._unacked[env.msg_id] = (env, self.transport.now + self.contract.retry_interval)
        self.transport.post(env)
        return env

    @property
    def contract(self) -> TransportContract:
        return self.transport.contract

    # -- local engine hooks -----------------------------------------------------

    def _on_publish(self, descriptor: BubbleDescriptor) -> None:
        if self._applying_sync:
            return
        self.ownership.setdefault(descriptor.id, self.gid)
        self._harvest_digests(descriptor)
        if self.transport is None:
            return
        payload = {
            "bubble": descriptor.id,
            "descriptor": descriptor.to_dict(),
            "history": list(self.fed.histories[descriptor.id]),
            "owner": self.ownership[descriptor.id],
        }
        for peer in self.peers:
            self._send(peer, SYNC_STATE, payload)

    def _route_signal(self, signal: StressSignal, target: str, hops) -> None:
        owner = self.owner_of(target)
        if owner == self.gid or self.transport is None:
            deliver_signal(self.fed, signal, target, tuple(hops))
            return
        self._send(owner, SIGNAL_DELIVER, {
            "signal": signal.to_dict(), "target": target, "hops": list(hops),
        })

    def _harvest_digests(self, descriptor: BubbleDescriptor) -> None:
        for binding in descriptor.local_bindings.values():
            if not binding.is_tombstone:
                self.known_digests.add(binding.digest)

    # -- sync -------------------------------------------------------------------

    def apply_sync(self, bid: str, descriptor_dict: dict, history: list[str],
                   owner: str) -> str:
        """Prefix-ordered histories fast-forward; divergence is a durable conflict."""
        descriptor = BubbleDescriptor.from_dict(descriptor_dict)
        local_history = self.fed.histories.get(bid, [])
        if local_history == history[: len(local_history)]:
            if len(history) > len(local_history) or bid not in self.fed.descriptors:
                self._applying_sync = True
                try:
                    self.fed.adopt_replica(descriptor, history)
                finally:
                    self._applying_sync = False
                self.ownership[bid] = owner
                self._harvest_digests(descriptor)
                for cs in _changeset_digests(descriptor_dict):
                    self.known_digests.add(cs)
                return "applied"
            return "stale"
        if history == local_history[: len(history)]:
            return "stale"
        conflict = {
            "bubble": bid,
            "local_seq": self.fed.descriptors[bid].seq if bid in self.fed.descriptors else None,
            "remote_seq": descriptor.seq,
            "remote_owner": owner,
            "remote_descriptor": descriptor_dict,
            "remote_history": list(history),
        }
        self.fed.sync_conflicts.append(conflict)
        return "conflict"

    # -- blobs --------------------------------------------------------------------

    def request_blob(self, digest: str, frm: str) -> None:
        if self.fed.store.has_blob(digest) or digest in self._blob_waits:
            return
        self._blob_waits[digest] = {
            "frm": frm,
            "next_retry": self.transport.now + self.contract.retry_interval,
            "attempts": 1,
        }
        self._send(frm, BLOB_REQUEST, {"digest": digest})

    # -- envelope handling -----------------------------------------------------------

    def receive_raw(self, raw: bytes) -> None:
        try:
            env = decode_envelope(raw)
        except (ValueError, KeyError, json.JSONDecodeError, UnicodeDecodeError, struct.error):
            return  # corrupted on the wire; retries cover it
        self.inbox.append(env)

    def process_inbox(self) -> None:
        inbox, self.inbox = self.inbox, []
        for env in inbox:
            self.handle(env)

    def handle(self, env: Envelope) -> None:
        if env.kind == ACK:
            self._unacked.pop(env.payload.get("ack_of"), None)
            return
        if env.kind == BLOB_REPLY:
            self._handle_blob_reply(env)
            return
        if env.kind == BLOB_REQUEST:
            digest = env.payload["digest"]
            if self.fed.store.has_blob(digest):
                data = self.fed.store.get_blob(digest)
                payload = {"digest": digest, "found": True,
                           "data": base64.b64encode(data).decode("ascii")}
            else:
                payload = {"digest": digest, "found": False, "data": ""}
            self._send(env.frm, BLOB_REPLY, payload)
            return

        # reliable kinds: ack every copy, act once
        self._send(env.frm, ACK, {"ack_of": env.msg_id})
        if env.msg_id in self.seen_msg_ids:
            return
        self.seen_msg_ids.add(env.msg_id)

        if env.kind == SIGNAL_DELIVER:
            signal = StressSignal.from_dict(env.payload["signal"])
            for d in _changeset_digests_of_signal(env.payload["signal"]):
                self.known_digests.add(d)
            deliver_signal(self.fed, signal, env.payload["target"],
                           tuple(env.payload["hops"]))
        elif env.kind == SYNC_STATE:
            self.apply_sync(env.payload["bubble"], env.payload["descriptor"],
                            env.payload["history"], env.payload["owner"])

    def _handle_blob_reply(self, env: Envelope) -> None:
        digest = env.payload["digest"]
        wait = self._blob_waits.get(digest)
        if wait is None:
            return
        if not env.payload.get("found"):
            self.fetch_errors.append({"digest": digest, "error": "NOT_FOUND",
                                      "from": env.frm})
            del self._blob_waits[digest]
            return
        data = base64.b64decode(env.payload["data"])
        if hash_bytes(data) != digest:
            self.fetch_errors.append({"digest": digest, "error": "DIGEST_MISMATCH",
                                      "from": env.frm})
            wait["next_retry"] = self.transport.now + 1  # re-request promptly
            return
        self.fed.store.put_blob(data)
        del self._blob_waits[digest]

    # -- timers ------------------------------------------------------------------

    def service_retries(self) -> None:
        now = self.transport.now
        for msg_id, (env, due) in list(self._unacked.items()):
            if now >= due:
                self.transport.post(env)
                self._unacked[msg_id] = (env, now + self.contract.retry_interval)
        for digest, wait in list(self._blob_waits.items()):
            if now >= wait["next_retry"]:
                wait["attempts"] += 1
                wait["next_retry"] = now + self.contract.retry_interval
                self._send(wait["frm"], BLOB_REQUEST, {"digest": digest})

    def quiet(self) -> bool:
        return not self.inbox and not self._unacked and not self._blob_waits


class GovernorSim:
    """Round-robin driver stepping every governor through the shared transport."""

    def __init__(self, contract: TransportContract, governors: dict[str, Governor]):
        self.transport = SimulatedTransport(contract, governors.keys())
        self.governors = dict(sorted(governors.items()))
        for gov in self.governors.values():
            gov.attach(self.transport, self.governors.keys())

    def broadcast_all_descriptors(self) -> None:
        """Seed replicas: every owner announces its bubbles once."""
        for gov in self.governors.values():
            for bid in sorted(gov.fed.descriptors):
                if gov.owner_of(bid) == gov.gid:
                    gov._on_publish(gov.fed.descriptors[bid])

    def step(self) -> None:
        for to, raw in self.transport.advance():
            self.governors[to].receive_raw(raw)
        for gid in sorted(self.governors):
            self.governors[gid].process_inbox()
        for gid in sorted(self.governors):
            self.governors[gid].service_retries()

    def quiescent(self) -> bool:
        return not self.transport.in_flight and all(
            gov.quiet() for gov in self.governors.values()
        )

    def run_until_quiescent(self, max_ticks: int = 10_000) -> int:
        ticks = 0
        while not self.quiescent():
            if ticks >= max_ticks:
                raise TimedOut(f"network not quiescent after {max_ticks} ticks")
            self.step()
            ticks += 1
        return ticks


def _changeset_digests(descriptor_dict: dict):
    for binding in descriptor_dict.get("local_bindings", {}).values():
        if binding.get("kind") == "bound":
            yield binding["digest"]


def _changeset_digests_of_signal(signal_dict: dict):
    for entry in signal_dict.get("changeset", {}).get("changes", {}).values():
        for value in (entry.get("before"), entry.get("after")):
            if value:
                yield value
