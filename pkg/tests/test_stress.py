import random

import pytest

from bubblekit import Binding, BubbleState, Federation
from bubblekit.errors import IllegalDecision, MergeIncomplete, UnknownSignal
from bubblekit.stress import (
    ACCEPT,
    CHANGE,
    CHOOSE_NEW,
    CHOOSE_OLD,
    DECLINE,
    FORK_CHOICE,
    MERGE,
    Resolution,
    activate,
    commit,
    propagation_trace,
    resolve_signal,
    structural_descendants,
)

from oracle import exported, reachability, seed_content


def put(fed, text):
    return fed.store.put_blob(text.encode())


def digests(fed, bid):
    return {p: el.digest for p, el in fed.resolve(bid).items()}


def chain(fed, n=3, content="core v1"):
    ids = [fed.create("n0", {"src/core": put(fed, content)})]
    for i in range(1, n):
        ids.append(fed.derive(ids[-1], f"n{i}"))
    return ids


def accept_all(fed):
    """Resolve every reachable pending signal, accepting/merging as required."""
    progress = True
    while progress:
        progress = False
        for bid in sorted(fed.descriptors):
            for signal in list(activate(fed, bid)):
                if signal.kind != CHANGE:
                    continue
                try:
                    resolve_signal(fed, bid, signal.signal_id, Resolution(ACCEPT, "auto"))
                except IllegalDecision:
                    conflicted = [
                        p for p in signal.changeset.changes
                        if (b := fed.get(bid).local_bindings.get(p)) is not None
                        and not b.is_tombstone
                    ]
                    merged = {p: fed.get(bid).local_bindings[p].digest for p in conflicted}
                    resolve_signal(fed, bid, signal.signal_id,
                                   Resolution(MERGE, "auto", merged=merged))
                progress = True


class TestCommit:
    def test_zero_diff_commit_sends_nothing(self, fed):
        d = put(fed, "v")
        a = fed.create("a", {"f": d})
        b = fed.derive(a, "b")
        cs = commit(fed, a, {"f": Binding.bound(d)})
        assert cs.changes == {}
        assert activate(fed, b) == []

    def test_commit_snapshots_pre_state(self, fed):
        d_old = put(fed, "old")
        a = fed.create("a", {"f": d_old})
        cs = commit(fed, a, {"f": Binding.bound(put(fed, "new"))})
        snap = fed.store.get_snapshot(cs.commit_snapshot)
        assert snap.entries == {"f": d_old}

    def test_changeset_diff(self, fed):
        d1, d2 = put(fed, "1"), put(fed, "2")
        a = fed.create("a", {"keep": d1, "gone": d1})
        cs = commit(fed, a, {
            "gone": Binding.tombstone(),
            "new": Binding.bound(d2),
        })
        assert cs.changes == {"gone": (d1, None), "new": (None, d2)}

    def test_signal_only_to_immediate_dependents(self, fed):
        a, b, c = chain(fed, 3)
        commit(fed, a, {"src/core": Binding.bound(put(fed, "v2"))})
        assert len(activate(fed, b)) == 1
        assert activate(fed, c) == []  # gated on b's acceptance

    def test_two_commits_queue_in_arrival_order(self, fed):
        a, b = chain(fed, 2)
        cs1 = commit(fed, a, {"x": Binding.bound(put(fed, "1"))})
        cs2 = commit(fed, a, {"x": Binding.bound(put(fed, "2"))})
        pending = activate(fed, b)
        assert [s.changeset.change_id for s in pending] == [cs1.change_id, cs2.change_id]


class TestAcceptMerge:
    def test_full_accept_converges_with_zero_new_blobs(self, fed):
        a, b, c = chain(fed, 3)
        fix = put(fed, "core v2")
        before = fed.store.blob_count()
        commit(fed, a, {"src/core": Binding.bound(fix)})
        accept_all(fed)
        for bid in (a, b, c):
            assert digests(fed, bid)["src/core"] == fix
        assert fed.store.blob_count() == before

    def test_accept_on_shadowed_path_is_illegal(self, fed):
        a, b = chain(fed, 2)
        mine = put(fed, "my local edit")
        commit(fed, b, {"src/core": Binding.bound(mine)})
        commit(fed, a, {"src/core": Binding.bound(put(fed, "upstream"))})
        signal = activate(fed, b)[0]
        with pytest.raises(IllegalDecision):
            resolve_signal(fed, b, signal.signal_id, Resolution(ACCEPT, "me"))

    def test_merge_must_cover_conflicts_exactly(self, fed):
        a, b = chain(fed, 2)
        commit(fed, b, {"src/core": Binding.bound(put(fed, "local"))})
        commit(fed, a, {"src/core": Binding.bound(put(fed, "upstream"))})
        signal = activate(fed, b)[0]
        with pytest.raises(MergeIncomplete):
            resolve_signal(fed, b, signal.signal_id, Resolution(MERGE, "me", merged={}))

    def test_merge_rebinds_and_forwards(self, fed):
        a, b, c = chain(fed, 3)
        commit(fed, b, {"src/core": Binding.bound(put(fed, "local"))})
        commit(fed, a, {"src/core": Binding.bound(put(fed, "upstream"))})
        merged_digest = put(fed, "merged result")
        signal = activate(fed, b)[0]
        out = resolve_signal(fed, b, signal.signal_id,
                             Resolution(MERGE, "me", merged={"src/core": merged_digest}))
        assert digests(fed, b)["src/core"] == merged_digest
        assert digests(fed, c)["src/core"] == merged_digest
        assert out.forwarded_to == [c]

    def test_tombstoned_path_keeps_accept_legal(self, fed):
        a, b = chain(fed, 2)
        commit(fed, b, {"src/core": Binding.tombstone()})
        commit(fed, a, {"src/core": Binding.bound(put(fed, "upstream"))})
        signal = activate(fed, b)[0]
        resolve_signal(fed, b, signal.signal_id, Resolution(ACCEPT, "me"))
        assert "src/core" not in digests(fed, b)

    def test_unknown_signal(self, fed):
        a, b = chain(fed, 2)
        with pytest.raises(UnknownSignal):
            resolve_signal(fed, b, "no-such-signal", Resolution(ACCEPT, "me"))

    def test_signal_cannot_be_resolved_twice(self, fed):
        a, b = chain(fed, 2)
        commit(fed, a, {"x": Binding.bound(put(fed, "1"))})
        signal = activate(fed, b)[0]
        resolve_signal(fed, b, signal.signal_id, Resolution(ACCEPT, "me"))
        with pytest.raises(UnknownSignal):
            resolve_signal(fed, b, signal.signal_id, Resolution(ACCEPT, "me"))


class TestDecline:
    def test_decline_pins_pre_commit_view(self, fed):
        a, b, c = chain(fed, 3)
        pre = digests(fed, b)
        commit(fed, a, {"src/core": Binding.bound(put(fed, "v2")),
                        "docs/new": Binding.bound(put(fed, "added"))})
        signal = activate(fed, b)[0]
        out = resolve_signal(fed, b, signal.signal_id, Resolution(DECLINE, "team-b"))
        assert digests(fed, b) == pre
        (pin,) = out.pins
        assert fed.get(b).structural_parents == (pin,)
        assert fed.get(pin).structural_parents == (a,)
        # the added path is hidden by a pin tombstone, not bound
        assert fed.get(pin).local_bindings["docs/new"].is_tombstone

    def test_decline_stops_change_and_forks_dependents(self, fed):
        a, b, c = chain(fed, 3)
        commit(fed, a, {"src/core": Binding.bound(put(fed, "v2"))})
        signal = activate(fed, b)[0]
        resolve_signal(fed, b, signal.signal_id, Resolution(DECLINE, "team-b"))
        pending_c = activate(fed, c)
        assert [s.kind for s in pending_c] == [FORK_CHOICE]
        fork = pending_c[0]
        assert fork.new_line == a
        assert fork.old_line == b

    def test_decline_choice_is_final_for_change(self, fed):
        a, b = chain(fed, 2)
        commit(fed, a, {"x": Binding.bound(put(fed, "1"))})
        signal = activate(fed, b)[0]
        with pytest.raises(IllegalDecision):
            resolve_signal(fed, b, signal.signal_id, Resolution(CHOOSE_NEW, "me"))


class TestForkChoice:
    def build_rip_off(self, fed):
        core_v1 = put(fed, "core v1")
        t1 = fed.create("T1", {"design/core": core_v1})
        t2 = fed.derive(t1, "T2")
        commit(fed, t2, {"team2/notes": Binding.bound(put(fed, "t2"))})
        t3 = fed.derive(t2, "T3")
        commit(fed, t3, {"team3/notes": Binding.bound(put(fed, "t3"))})
        t4 = fed.derive(t3, "T4")
        commit(fed, t4, {"team4/notes": Binding.bound(put(fed, "t4"))})
        core_v2 = put(fed, "core v2")
        commit(fed, t1, {"design/core": Binding.bound(core_v2)})
        return t1, t2, t3, t4, core_v1, core_v2

    def test_t1_to_t4_rip_off(self, fed):
        t1, t2, t3, t4, core_v1, core_v2 = self.build_rip_off(fed)

        sig = activate(fed, t2)[0]
        out2 = resolve_signal(fed, t2, sig.signal_id, Resolution(DECLINE, "T2"))
        (pin,) = out2.pins

        fork3 = activate(fed, t3)[0]
        out3 = resolve_signal(fed, t3, fork3.signal_id, Resolution(CHOOSE_NEW, "T3"))
        assert out3.reparented == (t2, t1)

        fork4 = activate(fed, t4)[0]
        assert fork4.new_line == t3 and fork4.old_line == t2
        out4 = resolve_signal(fed, t4, fork4.signal_id, Resolution(CHOOSE_OLD, "T4"))
        assert out4.reparented == (t3, t2)

        # two design lines
        assert fed.get(t3).structural_parents == (t1,)
        assert fed.get(t2).structural_parents == (pin,)
        assert fed.get(t4).structural_parents == (t2,)
        assert digests(fed, t3)["design/core"] == core_v2
        assert digests(fed, t4)["design/core"] == core_v1

    def test_choose_old_keeps_current_parent_at_first_hop(self, fed):
        t1, t2, t3, t4, core_v1, core_v2 = self.build_rip_off(fed)
        sig = activate(fed, t2)[0]
        resolve_signal(fed, t2, sig.signal_id, Resolution(DECLINE, "T2"))
        fork3 = activate(fed, t3)[0]
        out3 = resolve_signal(fed, t3, fork3.signal_id, Resolution(CHOOSE_OLD, "T3"))
        assert out3.reparented is None
        assert fed.get(t3).structural_parents == (t2,)
        assert digests(fed, t3)["design/core"] == core_v1
        # T4 can still jump to the changed line directly
        fork4 = activate(fed, t4)[0]
        assert fork4.new_line == t1 and fork4.old_line == t3
        resolve_signal(fed, t4, fork4.signal_id, Resolution(CHOOSE_NEW, "T4"))
        assert fed.get(t4).structural_parents == (t1,)
        assert digests(fed, t4)["design/core"] == core_v2

    def test_fork_rejects_change_decisions(self, fed):
        t1, t2, t3, t4, *_ = self.build_rip_off(fed)
        sig = activate(fed, t2)[0]
        resolve_signal(fed, t2, sig.signal_id, Resolution(DECLINE, "T2"))
        fork3 = activate(fed, t3)[0]
        for bad in (ACCEPT, DECLINE, MERGE):
            with pytest.raises(IllegalDecision):
                resolve_signal(fed, t3, fork3.signal_id, Resolution(bad, "T3"))


class TestTraceAndDelivery:
    def test_trace_after_full_accept(self, fed):
        a, b, c = chain(fed, 3)
        cs = commit(fed, a, {"src/core": Binding.bound(put(fed, "v2"))})
        accept_all(fed)
        trace = propagation_trace(fed, cs)
        assert {t["bubble"] for t in trace} == {b, c}
        assert all(t["delivered"] for t in trace)
        assert all(s["status"] == "accepted" for t in trace for s in t["signals"])

    def test_trace_after_decline_shows_fork_entries(self, fed):
        a, b, c = chain(fed, 3)
        cs = commit(fed, a, {"src/core": Binding.bound(put(fed, "v2"))})
        resolve_signal(fed, b, activate(fed, b)[0].signal_id, Resolution(DECLINE, "b"))
        trace = {t["bubble"]: t for t in propagation_trace(fed, cs)}
        assert trace[c]["delivered"]
        kinds = {fed.signals[s["signal_id"]].kind for s in trace[c]["signals"]}
        assert kinds == {FORK_CHOICE}

    def test_exactly_once_through_diamond(self, fed):
        top = fed.create("top", {"f": put(fed, "v")})
        left = fed.derive(top, "left")
        right = fed.derive(top, "right")
        bottom = fed.derive(left, "bottom")
        d = fed.get(bottom)
        fed.publish(d.bumped(structural_parents=d.structural_parents + (right,)))
        cs = commit(fed, top, {"f": Binding.bound(put(fed, "v2"))})
        accept_all(fed)
        deliveries = [k for k in fed.deliveries if k[0] == cs.change_id]
        assert sorted(b for _, b in deliveries) == sorted([left, right, bottom])

    def test_delivered_set_matches_reachability_oracle(self):
        rng = random.Random(300)
        for _ in range(60):
            fed = Federation()
            content = seed_content(fed, rng)
            ids = [fed.create("root", {"f": content[0]})]
            for i in range(rng.randrange(2, 8)):
                n_parents = 1 + (rng.random() < 0.3)
                parents = rng.sample(ids, min(n_parents, len(ids)))
                bid = fed.derive(parents[0], f"n{i}")
                if len(parents) > 1:
                    d = fed.get(bid)
                    fed.publish(d.bumped(structural_parents=d.structural_parents + (parents[1],)))
                ids.append(bid)
            origin = rng.choice(ids)
            cs = commit(fed, origin, {"f": put(fed, f"fresh {rng.random()}")})
            accept_all(fed)
            delivered = {b for (sid, b) in fed.deliveries if sid == cs.change_id}
            expected = reachability(exported(fed), origin)
            assert delivered == expected
            # at most once: the delivery map is keyed by (signal, bubble)
            assert structural_descendants(fed.descriptors, origin) == expected


class TestAudit:
    def test_audit_lines(self, fed):
        a, b = chain(fed, 2)
        commit(fed, a, {"x": Binding.bound(put(fed, "1"))})
        signal = activate(fed, b)[0]
        resolve_signal(fed, b, signal.signal_id, Resolution(ACCEPT, "reviewer"))
        assert len(fed.audit) == 1
        line = fed.audit[0].line()
        parts = line.split(" ")
        assert parts[1] == signal.signal_id
        assert parts[2] == b
        assert parts[3] == ACCEPT
        assert parts[4] == "reviewer"
