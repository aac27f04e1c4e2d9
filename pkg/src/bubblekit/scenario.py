"""Replayable scenario scripts and the baseline-emulation comparison mode.

A scenario is a JSON document with a versioned header, optional governor
and transport configuration, actor policies, and a timed event list.
Bubbles are referenced by script labels; every id is derived from the
scenario seed and the event index, so a script replays to byte-identical
exports, with or without governors.

Actor policies are standing decisions: when a stress signal lands on a
bubble whose actor has a policy, it is resolved immediately. ``pending``
actors leave signals queued; ``interactive`` actors prompt only when a
terminal is attached (scripted runs never block).

The baseline emulator replays the same script under the conventional
immutable-baseline model: derives copy their parent's content wholesale
and a fix must be applied separately at every affected stream head, which
is exactly the duplication the bubble run avoids.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

from . import repo as repo_mod
from . import stress
from .engine import Federation
from .errors import BubbleError, IllegalDecision, ScriptError
from .governor import Governor, GovernorSim, PartitionWindow, TransportContract
from .model import Binding, Constraint, canonical_json
from .store import MemoryResourceStore

COMMANDS = {
    "create", "derive", "clone", "embed", "commit", "freeze", "destroy",
    "insert", "retract", "dissolve", "constrain", "set_attr",
    "stress_resolve", "gc",
}

_POLICY_WORDS = {"accept", "decline", "choose_new", "choose_old", "pending", "interactive"}


def load_script(source) -> dict:
    if isinstance(source, dict):
        script = source
    else:
        with open(source, encoding="utf-8") as fh:
            script = json.load(fh)
    validate_script(script)
    return script


def validate_script(script: dict) -> None:
    if script.get("format") != 1:
        raise ScriptError(f"unsupported script format {script.get('format')!r}")
    events = script.get("events", [])
    last_tick = None
    labels: set[str] = set()
    governors = sorted(script.get("governors", {}) or {})
    for actor, policy in (script.get("actors") or {}).items():
        values = policy.values() if isinstance(policy, dict) else [policy]
        for value in values:
            if value not in _POLICY_WORDS:
                raise ScriptError(f"actor {actor!r}: unknown policy {value!r}")
    for i, event in enumerate(events):
        tick = event.get("tick")
        if not isinstance(tick, int):
            raise ScriptError(f"event {i}: missing integer tick")
        if last_tick is not None and tick < last_tick:
            raise ScriptError(f"event {i}: tick {tick} decreases")
        last_tick = tick
        command = event.get("command")
        if command not in COMMANDS:
            raise ScriptError(f"event {i}: unknown command {command!r}")
        args = event.get("args", {})
        for key in ("parent", "source", "bubble", "host", "guest",
                    "upstream", "downstream"):
            if key in args and args[key] not in labels:
                raise ScriptError(f"event {i}: undefined bubble label {args[key]!r}")
        if command in ("create", "derive", "clone", "insert"):
            label = args.get("label")
            if not label:
                raise ScriptError(f"event {i}: {command} needs a label")
            if label in labels:
                raise ScriptError(f"event {i}: duplicate label {label!r}")
            labels.add(label)
        if governors:
            owner = (script.get("ownership") or {}).get(args.get("label"))
            if owner is not None and owner not in governors:
                raise ScriptError(f"event {i}: unknown governor {owner!r}")


@dataclass
class RunResult:
    name: str
    mode: str
    export: dict
    dot: str
    metrics: dict
    audit: dict[str, list[str]]
    events: list[dict]
    traces: list[dict]
    quiesce_ticks: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "export": self.export,
            "dot": self.dot,
            "metrics": self.metrics,
            "audit": self.audit,
            "events": self.events,
            "traces": self.traces,
            "quiesce_ticks": self.quiesce_ticks,
        }

    def to_json_bytes(self) -> bytes:
        return canonical_json(self.to_dict())


def _event_id(seed: int, index: int, sub: int = 0) -> str:
    raw = f"{seed}\x00{index}\x00{sub}".encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:32]


def _policy_decision(policy, kind: str) -> str | None:
    if policy is None:
        return None
    if isinstance(policy, dict):
        policy = policy.get("change" if kind == stress.CHANGE else "fork")
        if policy is None:
            return None
    if policy == "pending":
        return None
    if policy == "interactive":
        if sys.stdin is not None and sys.stdin.isatty():
            return "interactive"
        return None
    if kind == stress.CHANGE and policy in (stress.ACCEPT, stress.DECLINE):
        return policy
    if kind == stress.FORK_CHOICE and policy in (stress.CHOOSE_NEW, stress.CHOOSE_OLD):
        return policy
    return None


class ScenarioRunner:
    def __init__(self, script, *, seed: int | None = None,
                 actor_overrides: dict | None = None,
                 repo_root: str | None = None, max_ticks: int = 20_000):
        self.script = load_script(script)
        self.seed = self.script.get("seed", 0) if seed is None else seed
        self.policies = dict(self.script.get("actors") or {})
        if actor_overrides:
            self.policies.update(actor_overrides)
        self.repo_root = repo_root
        self.max_ticks = max_ticks
        self.labels: dict[str, str] = {}
        self.names: dict[str, str] = {}  # id -> label, for reports
        self.events_report: list[dict] = []
        self.quiesce_ticks = 0
        self.commit_changesets: list[stress.ChangeSet] = []

        gov_cfg = self.script.get("governors") or {}
        self.multi = bool(gov_cfg)
        if self.multi:
            if repo_root is not None:
                raise ScriptError("repository-backed runs support a single governor only")
            contract = _transport_contract(self.script.get("transport") or {}, self.seed)
            governors = {}
            for gid in sorted(gov_cfg):
                fed = Federation(store=MemoryResourceStore())
                fed.on_delivery = self._delivery_hook(fed)
                governors[gid] = Governor(gid, fed)
            self.sim = GovernorSim(contract, governors)
            self.governors = governors
            self.default_owner = sorted(governors)[0]
            self.ownership_cfg = dict(self.script.get("ownership") or {})
        else:
            if repo_root is not None:
                if not repo_mod.is_repo(repo_root):
                    repo_mod.init_repo(repo_root)
                self.fed = repo_mod.load_federation(repo_root)
            else:
                self.fed = Federation(store=MemoryResourceStore())
            self.fed.on_delivery = self._delivery_hook(self.fed)
            self.sim = None

    # -- policy wiring -----------------------------------------------------

    def _delivery_hook(self, fed: Federation):
        def on_delivery(bid: str, signal: stress.StressSignal) -> None:
            actor = fed.descriptors[bid].attributes.get("actor")
            decision = _policy_decision(self.policies.get(actor), signal.kind)
            if decision == "interactive":
                decision = _prompt_decision(bid, signal)
            if decision is None:
                return
            try:
                stress.resolve_signal(fed, bid, signal.signal_id,
                                      stress.Resolution(decision, decided_by=actor or "anonymous"))
            except IllegalDecision:
                pass  # stays pending; a scripted stress_resolve can merge later
        return on_delivery

    # -- bubble/blob helpers -------------------------------------------------

    def _fed_for(self, bid: str | None, label: str | None = None) -> Federation:
        if not self.multi:
            return self.fed
        if bid is not None:
            for gov in self.governors.values():
                if gov.ownership.get(bid) == gov.gid:
                    return gov.fed
            return self.governors[self.default_owner].fed
        owner = self.ownership_cfg.get(label, self.default_owner)
        return self.governors[owner].fed

    def _lookup(self, label: str) -> str:
        try:
            return self.labels[label]
        except KeyError:
            raise ScriptError(f"unknown bubble label {label!r}") from None

    def _binding_for(self, fed: Federation, spec) -> Binding | None:
        if isinstance(spec, str):
            spec = {"text": spec}
        if spec.get("tombstone"):
            return Binding.tombstone()
        if spec.get("remove"):
            return None
        if "digest" in spec:
            return Binding.bound(spec["digest"])
        return Binding.bound(fed.store.put_blob(spec["text"].encode("utf-8")))

    def _constraint_for(self, spec: dict) -> Constraint:
        kind = spec.get("kind")
        if kind == "forbid_provenance":
            return Constraint.forbid_provenance(self._lookup(spec["bubble"]))
        if kind == "forbid_path":
            return Constraint.forbid_path(spec["pattern"])
        if kind == "require_attribute":
            return Constraint.require_attribute(spec["key"], spec["value"])
        raise ScriptError(f"unknown constraint kind {kind!r}")

    def _blob_count(self) -> int:
        if self.multi:
            return sum(g.fed.store.blob_count() for g in self.governors.values())
        return self.fed.store.blob_count()

    # -- event execution --------------------------------------------------------

    def run(self) -> RunResult:
        events = self.script.get("events", [])
        index = 0
        while index < len(events):
            tick = events[index]["tick"]
            group_end = index
            while group_end < len(events) and events[group_end]["tick"] == tick:
                group_end += 1
            for i in range(index, group_end):
                self._execute(i, events[i])
            if self.multi:
                self.quiesce_ticks += self.sim.run_until_quiescent(self.max_ticks)
            index = group_end
        if self.multi:
            self.quiesce_ticks += self.sim.run_until_quiescent(self.max_ticks)
        if self.repo_root is not None:
            repo_mod.save_federation(self.fed, self.repo_root)
        return self._result()

    def _execute(self, index: int, event: dict) -> None:
        command = event["command"]
        args = event.get("args", {})
        before = self._blob_count()
        report = {"index": index, "tick": event["tick"], "command": command,
                  "ok": True, "error": None}
        try:
            self._dispatch(index, command, args)
        except BubbleError as exc:
            report["ok"] = False
            report["error"] = exc.code
        report["blobs_added"] = self._blob_count() - before
        self.events_report.append(report)

    def _attrs(self, args: dict) -> dict:
        attrs = dict(args.get("attributes") or {})
        if args.get("actor"):
            attrs["actor"] = args["actor"]
        return attrs

    def _dispatch(self, index: int, command: str, args: dict) -> None:
        if command == "create":
            label = args["label"]
            fed = self._fed_for(None, label)
            bindings = {}
            for path, spec in (args.get("bindings") or {}).items():
                binding = self._binding_for(fed, spec)
                if binding is None or binding.is_tombstone:
                    raise ScriptError(f"event {index}: create bindings must be content")
                bindings[path] = binding.digest
            bid = fed.create(args.get("name", label), bindings,
                             attributes=self._attrs(args),
                             bubble_id=_event_id(self.seed, index))
            self.labels[label] = bid
            self.names[bid] = label
        elif command in ("derive", "clone"):
            src_label = args["parent" if command == "derive" else "source"]
            src = self._lookup(src_label)
            # the child lives at its owner; in governor mode the source
            # replica must already have synced there
            fed = self._fed_for(None, args["label"])
            method = fed.derive if command == "derive" else fed.clone
            bid = method(src, args.get("name", args["label"]),
                         attributes=self._attrs(args),
                         bubble_id=_event_id(self.seed, index))
            self.labels[args["label"]] = bid
            self.names[bid] = args["label"]
        elif command == "commit":
            bid = self._lookup(args["bubble"])
            fed = self._fed_for(bid)
            edits = {path: self._binding_for(fed, spec)
                     for path, spec in (args.get("edits") or {}).items()}
            changeset = stress.commit(fed, bid, edits,
                                      actor=args.get("actor", "script"))
            self.commit_changesets.append(changeset)
        elif command == "embed":
            host = self._lookup(args["host"])
            self._fed_for(host).embed(host, args.get("mount", ""), self._lookup(args["guest"]))
        elif command == "insert":
            down = self._lookup(args["downstream"])
            fed = self._fed_for(down)
            bindings = {path: self._binding_for(fed, spec)
                        for path, spec in (args.get("bindings") or {}).items()}
            bid = fed.insert_between(self._lookup(args["upstream"]), down,
                                     args.get("name", args["label"]), bindings,
                                     bubble_id=_event_id(self.seed, index))
            self.labels[args["label"]] = bid
            self.names[bid] = args["label"]
        elif command == "retract":
            bid = self._lookup(args["bubble"])
            self._fed_for(bid).retract(bid)
        elif command == "dissolve":
            bid = self._lookup(args["bubble"])
            self._fed_for(bid).dissolve(bid, self._lookup(args["source"]))
        elif command == "freeze":
            bid = self._lookup(args["bubble"])
            self._fed_for(bid).freeze(bid)
        elif command == "destroy":
            bid = self._lookup(args["bubble"])
            self._fed_for(bid).destroy(bid)
        elif command == "constrain":
            bid = self._lookup(args["bubble"])
            self._fed_for(bid).add_constraint(bid, self._constraint_for(args["constraint"]))
        elif command == "set_attr":
            bid = self._lookup(args["bubble"])
            self._fed_for(bid).set_attribute(bid, args["key"], args["value"])
        elif command == "stress_resolve":
            bid = self._lookup(args["bubble"])
            fed = self._fed_for(bid)
            pending = fed.get(bid).pending
            if not pending:
                raise ScriptError(f"event {index}: no pending signal at {args['bubble']}")
            signal_id = args.get("signal", pending[0])
            merged = None
            if args.get("merged"):
                merged = {}
                for path, spec in args["merged"].items():
                    binding = self._binding_for(fed, spec)
                    merged[path] = binding.digest
            stress.resolve_signal(fed, bid, signal_id,
                                  stress.Resolution(args["decision"],
                                                    decided_by=args.get("actor", "script"),
                                                    merged=merged))
        elif command == "gc":
            fed = self.fed if not self.multi else self.governors[self.default_owner].fed
            fed.store.gc(fed.gc_roots())
        else:  # pragma: no cover - validate_script rejects these
            raise ScriptError(f"event {index}: unknown command {command!r}")

    # -- results -------------------------------------------------------------------

    def _owner_map(self) -> dict[str, str]:
        owners: dict[str, str] = {}
        for gid in sorted(self.governors):
            for bid, owner in self.governors[gid].ownership.items():
                owners.setdefault(bid, owner)
        return owners

    def export_descriptors(self) -> dict:
        if not self.multi:
            return json.loads(self.fed.export_json().decode("ascii"))
        owners = self._owner_map()
        bubbles = {}
        for bid in sorted(owners):
            fed = self.governors[owners[bid]].fed
            if bid in fed.descriptors:
                bubbles[bid] = fed.descriptors[bid].to_dict()
        return {"format": 1, "bubbles": bubbles}

    def _result(self) -> RunResult:
        export = self.export_descriptors()
        if self.multi:
            dot = ""
            audit = {gid: [e.line() for e in self.governors[gid].fed.audit]
                     for gid in sorted(self.governors)}
            pending = sum(len(d["pending"]) for d in export["bubbles"].values())
            deliveries = sum(len(g.fed.deliveries) for g in self.governors.values())
        else:
            dot = self.fed.export_dot()
            audit = {"local": [e.line() for e in self.fed.audit]}
            pending = sum(len(d.pending) for d in self.fed.descriptors.values())
            deliveries = len(self.fed.deliveries)

        traces = []
        for changeset in self.commit_changesets:
            fed = self._fed_for(changeset.origin)
            traces.append({"change_id": changeset.change_id,
                           "origin": changeset.origin,
                           "trace": stress.propagation_trace(fed, changeset)})

        commit_events = [e for e in self.events_report if e["command"] == "commit" and e["ok"]]
        metrics = {
            "labels": {label: self.labels[label] for label in sorted(self.labels)},
            "commits": len(commit_events),
            "commit_blobs_added": sum(e["blobs_added"] for e in commit_events),
            "blobs_total": self._blob_count(),
            "pending_signals": pending,
            "deliveries": deliveries,
        }
        return RunResult(
            name=self.script.get("name", "scenario"),
            mode="governors" if self.multi else "single",
            export=export,
            dot=dot,
            metrics=metrics,
            audit=audit,
            events=self.events_report,
            traces=traces,
            quiesce_ticks=self.quiesce_ticks,
        )


def _prompt_decision(bid: str, signal: stress.StressSignal) -> str | None:
    options = ("accept/decline" if signal.kind == stress.CHANGE
               else "choose_new/choose_old")
    answer = input(f"signal {signal.signal_id[:8]} at {bid[:8]} [{options}/skip]: ").strip()
    return answer if answer in _POLICY_WORDS else None


def _transport_contract(cfg: dict, seed: int) -> TransportContract:
    partitions = []
    for window in cfg.get("partitions", []):
        if isinstance(window, dict):
            start, end, pair = window["from"], window["until"], window["pair"]
        else:
            start, end, pair = window[0], window[1], window[2]
        partitions.append(PartitionWindow(start, end, frozenset(pair)))
    latency = cfg.get("latency", [1, 5])
    return TransportContract(
        seed=cfg.get("seed", seed),
        latency=(latency[0], latency[1]),
        drop_probability=cfg.get("drop_probability", 0.0),
        duplicate_probability=cfg.get("duplicate_probability", 0.0),
        retry_interval=cfg.get("retry_interval", 12),
        partitions=tuple(partitions),
    )


def run_scenario(source, *, seed: int | None = None, actor_overrides=None,
                 repo_root: str | None = None, max_ticks: int = 20_000) -> RunResult:
    return ScenarioRunner(source, seed=seed, actor_overrides=actor_overrides,
                          repo_root=repo_root, max_ticks=max_ticks).run()


# ---------------------------------------------------------------------------
# baseline emulation


def emulate_baselines(source, *, actor_overrides=None) -> dict:
    """Replay a bugfix script under the immutable-baseline stream model.

    Derives copy their parent's content wholesale; a commit cannot edit the
    ancestor it lands on, so the fix is applied once per affected stream
    head. Heads whose actor never activates stay unfixed and are counted,
    never silently dropped.
    """
    script = load_script(source)
    policies = dict(script.get("actors") or {})
    if actor_overrides:
        policies.update(actor_overrides)

    nodes: dict[str, dict] = {}
    copy_writes = 0
    fix_applications = 0
    fix_writes = 0
    unfixed_heads = 0
    commits = 0

    def leaves_below(label: str) -> list[str]:
        out = []
        stack = [label]
        while stack:
            node = stack.pop()
            children = nodes[node]["children"]
            if not children:
                out.append(node)
            else:
                stack.extend(children)
        return sorted(out)

    for i, event in enumerate(script.get("events", [])):
        command = event["command"]
        args = event.get("args", {})
        if command == "create":
            content = {p: _content_key(spec) for p, spec in (args.get("bindings") or {}).items()}
            nodes[args["label"]] = {"content": content, "children": [],
                                    "actor": args.get("actor")}
            copy_writes += len(content)
        elif command in ("derive", "clone"):
            parent = args["parent" if command == "derive" else "source"]
            content = dict(nodes[parent]["content"])
            nodes[args["label"]] = {"content": content, "children": [],
                                    "actor": args.get("actor")}
            nodes[parent]["children"].append(args["label"])
            copy_writes += len(content)
        elif command == "commit":
            commits += 1
            target = args["bubble"]
            changes = {p: _content_key(spec) for p, spec in (args.get("edits") or {}).items()}
            for leaf in leaves_below(target):
                policy = policies.get(nodes[leaf]["actor"])
                decision = _policy_decision(policy, stress.CHANGE) if leaf != target else stress.ACCEPT
                if leaf != target and decision is None:
                    unfixed_heads += 1
                    continue
                fix_applications += 1
                fix_writes += len(changes)
                nodes[leaf]["content"].update(changes)
        else:
            raise ScriptError(
                f"event {i}: baseline emulation supports create/derive/clone/commit only"
            )

    heads = sorted(label for label, node in nodes.items() if not node["children"])
    return {
        "streams": len(nodes),
        "heads": len(heads),
        "commits": commits,
        "applications": fix_applications,
        "fix_writes": fix_writes,
        "copy_writes": copy_writes,
        "unfixed_heads": unfixed_heads,
    }


def _content_key(spec) -> str:
    if isinstance(spec, str):
        return spec
    if "text" in spec:
        return spec["text"]
    if "digest" in spec:
        return spec["digest"]
    raise ScriptError("baseline emulation needs content bindings")


def compare_with_baselines(source, *, seed: int | None = None,
                           actor_overrides=None) -> dict:
    run = run_scenario(source, seed=seed, actor_overrides=actor_overrides)
    baseline = emulate_baselines(source, actor_overrides=actor_overrides)
    return {
        "bubble": {
            "fix_applications": run.metrics["commits"],
            "new_blobs": run.metrics["commit_blobs_added"],
            "pending_signals": run.metrics["pending_signals"],
        },
        "baseline": {
            "fix_applications": baseline["applications"],
            "new_blobs": baseline["fix_writes"],
            "unfixed_heads": baseline["unfixed_heads"],
        },
        "heads": baseline["heads"],
    }
