"""bubblectl: inspect and manipulate bubbles from the command line.

Exit codes: 0 success, 1 domain error (stable error code in the output),
2 usage error. ``--json`` switches every subcommand to machine output.
The repository root comes from ``--repo`` or the BUBBLEKIT_REPO
environment variable, defaulting to the current directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import repo as repo_mod
from . import scenario as scenario_mod
from . import stress
from .engine import Federation, effective_constraints
from .errors import BubbleError, UnknownBubble
from .model import Binding, Constraint, canonical_json


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bubblectl",
                                     description="inspect and manipulate bubbles")
    parser.add_argument("--repo", help="repository root (default: $BUBBLEKIT_REPO or .)")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("init", help="initialize a repository")

    p = sub.add_parser("blob", help="raw blob access")
    blob_sub = p.add_subparsers(dest="blob_command", required=True)
    bp = blob_sub.add_parser("put")
    bp.add_argument("--file", help="read content from a file (default: stdin)")
    bp.add_argument("--text", help="literal content")
    bg = blob_sub.add_parser("get")
    bg.add_argument("digest")
    bg.add_argument("--out", help="write to a file instead of stdout")

    p = sub.add_parser("create", help="create a bubble")
    p.add_argument("--name", required=True)
    p.add_argument("--bind", action="append", default=[], metavar="PATH=SRC",
                   help="SRC is @file, hex:<digest> or literal text")
    p.add_argument("--actor")
    p.add_argument("--attr", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("derive", help="derive a child bubble")
    p.add_argument("parent")
    p.add_argument("--name", required=True)
    p.add_argument("--actor")
    p.add_argument("--attr", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("clone", help="clone a bubble (historical + structural link)")
    p.add_argument("source")
    p.add_argument("--name", required=True)
    p.add_argument("--actor")
    p.add_argument("--attr", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("embed", help="mount a guest bubble under a path prefix")
    p.add_argument("host")
    p.add_argument("mount")
    p.add_argument("guest")

    p = sub.add_parser("commit", help="edit local bindings and stress dependents")
    p.add_argument("bubble")
    p.add_argument("--set", action="append", default=[], dest="sets", metavar="PATH=SRC")
    p.add_argument("--tombstone", action="append", default=[], metavar="PATH")
    p.add_argument("--remove", action="append", default=[], metavar="PATH")
    p.add_argument("--actor", default="cli")

    for name in ("freeze", "destroy", "retract"):
        p = sub.add_parser(name)
        p.add_argument("bubble")

    p = sub.add_parser("insert", help="insert a bubble between two adjacent bubbles")
    p.add_argument("upstream")
    p.add_argument("downstream")
    p.add_argument("--name", required=True)
    p.add_argument("--bind", action="append", default=[], metavar="PATH=SRC")

    p = sub.add_parser("dissolve", help="drop a redundant structural edge to a clone source")
    p.add_argument("bubble")
    p.add_argument("source")

    p = sub.add_parser("resolve", help="the merged path -> digest view of a bubble")
    p.add_argument("bubble")

    p = sub.add_parser("examine", help="ancestry walk with contributed paths")
    p.add_argument("bubble")

    p = sub.add_parser("constraints")
    c_sub = p.add_subparsers(dest="constraints_command", required=True)
    cc = c_sub.add_parser("check")
    cc.add_argument("bubble")
    cl = c_sub.add_parser("list")
    cl.add_argument("bubble")
    ca = c_sub.add_parser("add")
    ca.add_argument("bubble")
    group = ca.add_mutually_exclusive_group(required=True)
    group.add_argument("--forbid-provenance", metavar="BUBBLE")
    group.add_argument("--forbid-path", metavar="GLOB")
    group.add_argument("--require-attr", metavar="KEY=VALUE")

    p = sub.add_parser("attr")
    a_sub = p.add_subparsers(dest="attr_command", required=True)
    aset = a_sub.add_parser("set")
    aset.add_argument("bubble")
    aset.add_argument("key")
    aset.add_argument("value")

    p = sub.add_parser("stress", help="pending design-stress signals")
    s_sub = p.add_subparsers(dest="stress_command", required=True)
    sl = s_sub.add_parser("list")
    sl.add_argument("bubble")
    for decision in ("accept", "decline"):
        sp = s_sub.add_parser(decision)
        sp.add_argument("bubble")
        sp.add_argument("signal")
        sp.add_argument("--actor", default="cli")
    sm = s_sub.add_parser("merge")
    sm.add_argument("bubble")
    sm.add_argument("signal")
    sm.add_argument("merges", nargs="*", metavar="PATH=SRC")
    sm.add_argument("--actor", default="cli")
    sc = s_sub.add_parser("choose")
    sc.add_argument("bubble")
    sc.add_argument("signal")
    sc.add_argument("line", choices=["new", "old"])
    sc.add_argument("--actor", default="cli")

    p = sub.add_parser("gov")
    g_sub = p.add_subparsers(dest="gov_command", required=True)
    gr = g_sub.add_parser("run", help="run a multi-governor scenario to quiescence")
    gr.add_argument("script")
    gr.add_argument("--seed", type=int)
    gr.add_argument("--max-ticks", type=int, default=20_000)

    p = sub.add_parser("scenario")
    sc_sub = p.add_subparsers(dest="scenario_command", required=True)
    for name in ("run", "emulate", "compare"):
        sp = sc_sub.add_parser(name)
        sp.add_argument("script")
        if name != "emulate":
            sp.add_argument("--seed", type=int)

    p = sub.add_parser("export")
    p.add_argument("what", choices=["dot", "json"])

    sub.add_parser("gc", help="remove unreachable blobs (explicit, never automatic)")
    sub.add_parser("stats")
    return parser


# ---------------------------------------------------------------------------


def _repo_root(args) -> str:
    return args.repo or os.environ.get("BUBBLEKIT_REPO") or "."


def _split_kv(item: str, flag: str) -> tuple[str, str]:
    if "=" not in item:
        raise BubbleError(f"{flag} expects PATH=VALUE, got {item!r}")
    key, value = item.split("=", 1)
    return key, value


def _content_digest(fed: Federation, src: str) -> str:
    if src.startswith("@"):
        with open(src[1:], "rb") as fh:
            return fed.store.put_blob(fh.read())
    if src.startswith("hex:"):
        return src[4:]
    return fed.store.put_blob(src.encode("utf-8"))


def _find_bubble(fed: Federation, ref: str) -> str:
    if ref in fed.descriptors:
        return ref
    matches = [bid for bid, d in fed.descriptors.items() if d.name == ref]
    if len(matches) == 1:
        return matches[0]
    if len(matches) > 1:
        raise UnknownBubble(f"name {ref!r} is ambiguous: {sorted(matches)}")
    raise UnknownBubble(f"no bubble with id or name {ref!r}")


class Output:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, data: dict, text: str | None = None) -> None:
        if self.as_json:
            sys.stdout.write(canonical_json(data).decode("ascii") + "\n")
        else:
            sys.stdout.write((text if text is not None else json.dumps(data, indent=2)) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Output(args.json)
    try:
        return _run(args, out)
    except BubbleError as exc:
        payload = {"error": exc.code, "message": str(exc)}
        if out.as_json:
            sys.stdout.write(canonical_json(payload).decode("ascii") + "\n")
        else:
            sys.stderr.write(f"error [{exc.code}]: {exc}\n")
        return 1


def _run(args, out: Output) -> int:
    root = _repo_root(args)
    command = args.command

    if command == "init":
        repo_mod.init_repo(root)
        out.emit({"repo": root}, f"initialized repository at {root}")
        return 0

    if command == "scenario":
        return _run_scenario(args, out)
    if command == "gov":
        result = scenario_mod.run_scenario(args.script, seed=args.seed,
                                           max_ticks=args.max_ticks)
        out.emit(result.to_dict(),
                 f"quiescent after {result.quiesce_ticks} ticks; "
                 f"{result.metrics['deliveries']} deliveries")
        return 0

    fed = repo_mod.load_federation(root)
    code = _run_repo_command(args, out, fed)
    repo_mod.save_federation(fed, root)
    return code


def _run_scenario(args, out: Output) -> int:
    if args.scenario_command == "run":
        result = scenario_mod.run_scenario(args.script, seed=args.seed)
        out.emit(result.to_dict())
    elif args.scenario_command == "emulate":
        out.emit(scenario_mod.emulate_baselines(args.script))
    else:
        out.emit(scenario_mod.compare_with_baselines(args.script, seed=args.seed))
    return 0


def _bindings_from_flags(fed: Federation, flags) -> dict[str, str]:
    out = {}
    for item in flags:
        path, src = _split_kv(item, "--bind")
        out[path] = _content_digest(fed, src)
    return out


def _attrs_from_flags(args) -> dict[str, str]:
    attrs = {}
    for item in getattr(args, "attr", []) or []:
        key, value = _split_kv(item, "--attr")
        attrs[key] = value
    if getattr(args, "actor", None):
        attrs["actor"] = args.actor
    return attrs


def _run_repo_command(args, out: Output, fed: Federation) -> int:
    command = args.command

    if command == "blob":
        if args.blob_command == "put":
            if args.text is not None:
                data = args.text.encode("utf-8")
            elif args.file:
                with open(args.file, "rb") as fh:
                    data = fh.read()
            else:
                data = sys.stdin.buffer.read()
            digest = fed.store.put_blob(data)
            out.emit({"digest": digest}, digest)
        else:
            data = fed.store.get_blob(args.digest)
            if args.out:
                with open(args.out, "wb") as fh:
                    fh.write(data)
                out.emit({"written": args.out}, f"wrote {args.out}")
            else:
                sys.stdout.buffer.write(data)
        return 0

    if command == "create":
        bid = fed.create(args.name, _bindings_from_flags(fed, args.bind),
                         attributes=_attrs_from_flags(args))
        out.emit({"id": bid, "name": args.name}, bid)
        return 0

    if command in ("derive", "clone"):
        src = _find_bubble(fed, args.parent if command == "derive" else args.source)
        method = fed.derive if command == "derive" else fed.clone
        bid = method(src, args.name, attributes=_attrs_from_flags(args))
        out.emit({"id": bid, "name": args.name}, bid)
        return 0

    if command == "embed":
        host = _find_bubble(fed, args.host)
        fed.embed(host, args.mount, _find_bubble(fed, args.guest))
        out.emit({"host": host, "mount": args.mount}, "embedded")
        return 0

    if command == "commit":
        bid = _find_bubble(fed, args.bubble)
        edits: dict[str, Binding | None] = {}
        for item in args.sets:
            path, src = _split_kv(item, "--set")
            edits[path] = Binding.bound(_content_digest(fed, src))
        for path in args.tombstone:
            edits[path] = Binding.tombstone()
        for path in args.remove:
            edits[path] = None
        changeset = stress.commit(fed, bid, edits, actor=args.actor)
        out.emit(changeset.to_dict(),
                 f"commit {changeset.change_id} ({len(changeset.changes)} changed paths)")
        return 0

    if command in ("freeze", "destroy", "retract"):
        bid = _find_bubble(fed, args.bubble)
        getattr(fed, command)(bid)
        out.emit({"id": bid, "state": fed.get(bid).state.value}, f"{command} ok")
        return 0

    if command == "insert":
        bid = fed.insert_between(
            _find_bubble(fed, args.upstream), _find_bubble(fed, args.downstream),
            args.name,
            {p: Binding.bound(d) for p, d in _bindings_from_flags(fed, args.bind).items()},
        )
        out.emit({"id": bid}, bid)
        return 0

    if command == "dissolve":
        bid = _find_bubble(fed, args.bubble)
        fed.dissolve(bid, _find_bubble(fed, args.source))
        out.emit({"id": bid}, "dissolved")
        return 0

    if command == "resolve":
        bid = _find_bubble(fed, args.bubble)
        view = fed.resolve(bid)
        data = {p: {"digest": el.digest, "provider": el.provider, "via": list(el.via)}
                for p, el in sorted(view.items())}
        text = "\n".join(f"{p}\t{el.digest}" for p, el in sorted(view.items()))
        out.emit({"bubble": bid, "elements": data}, text)
        return 0

    if command == "examine":
        bid = _find_bubble(fed, args.bubble)
        report = fed.examine(bid)
        lines = [f"{e.kind:10} {e.src} -> {e.dst} {sorted(e.contributed)}"
                 for e in report.entries]
        out.emit(report.to_dict(), "\n".join(lines))
        return 0

    if command == "constraints":
        bid = _find_bubble(fed, args.bubble)
        if args.constraints_command == "check":
            violations = fed.check_constraints(bid)
            out.emit({"bubble": bid, "violations": [v.to_dict() for v in violations]},
                     "\n".join(v.detail for v in violations) or "ok")
            return 0 if not violations else 1
        if args.constraints_command == "list":
            pairs = [{"declared_by": decl, "constraint": c.to_dict()}
                     for decl, c in effective_constraints(fed.descriptors, bid)]
            out.emit({"bubble": bid, "constraints": pairs},
                     "\n".join(f"{p['declared_by']}: {p['constraint']}" for p in pairs))
            return 0
        if args.forbid_provenance:
            constraint = Constraint.forbid_provenance(_find_bubble(fed, args.forbid_provenance))
        elif args.forbid_path:
            constraint = Constraint.forbid_path(args.forbid_path)
        else:
            key, value = _split_kv(args.require_attr, "--require-attr")
            constraint = Constraint.require_attribute(key, value)
        fed.add_constraint(bid, constraint)
        out.emit({"bubble": bid, "added": constraint.to_dict()}, "constraint added")
        return 0

    if command == "attr":
        bid = _find_bubble(fed, args.bubble)
        fed.set_attribute(bid, args.key, args.value)
        out.emit({"bubble": bid, args.key: args.value}, "ok")
        return 0

    if command == "stress":
        return _run_stress(args, out, fed)

    if command == "export":
        if args.what == "json":
            sys.stdout.write(fed.export_json().decode("ascii") + "\n")
        else:
            sys.stdout.write(fed.export_dot())
        return 0

    if command == "gc":
        removed = fed.store.gc(fed.gc_roots())
        out.emit({"removed": removed}, f"removed {removed} blobs")
        return 0

    if command == "stats":
        stats = fed.stats()
        out.emit(stats, "\n".join(f"{k}: {v}" for k, v in stats.items()))
        return 0

    raise BubbleError(f"unhandled command {command}")  # pragma: no cover


def _run_stress(args, out: Output, fed: Federation) -> int:
    bid = _find_bubble(fed, args.bubble)
    if args.stress_command == "list":
        signals = stress.activate(fed, bid, actor="cli")
        data = [s.to_dict() for s in signals]
        text = "\n".join(f"{s.signal_id} {s.kind} from {s.changeset.origin}" for s in signals)
        out.emit({"bubble": bid, "pending": data}, text or "no pending signals")
        return 0

    if args.stress_command == "merge":
        merged = {}
        for item in args.merges:
            path, src = _split_kv(item, "merge")
            merged[path] = _content_digest(fed, src)
        resolution = stress.Resolution(stress.MERGE, decided_by=args.actor, merged=merged)
    elif args.stress_command == "choose":
        decision = stress.CHOOSE_NEW if args.line == "new" else stress.CHOOSE_OLD
        resolution = stress.Resolution(decision, decided_by=args.actor)
    else:
        resolution = stress.Resolution(args.stress_command, decided_by=args.actor)
    outcome = stress.resolve_signal(fed, bid, args.signal, resolution)
    out.emit(
        {"bubble": bid, "signal": args.signal, "decision": outcome.decision,
         "forwarded_to": outcome.forwarded_to, "pins": outcome.pins,
         "reparented": list(outcome.reparented) if outcome.reparented else None},
        f"{outcome.decision}: forwarded to {len(outcome.forwarded_to)} dependents",
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
