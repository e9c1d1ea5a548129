import random

import pytest
from oracles import KvRef, bfs_ref, filter_ref, st_scan

from trinity.errors import (
    InvalidBox,
    NoEligibleSecondary,
    NodeUnavailable,
    NoPrimary,
    NotPrimary,
    StaleEpoch,
    TrinityError,
    TypeMismatch,
    UnknownCollection,
    UnknownNode,
)
from trinity.nosql.engines import (
    DocumentCollection,
    GraphStore,
    KeyValueStore,
    KvPut,
    MarkApplied,
    NodeStores,
    SpatioTemporalStore,
    UpsertDoc,
    UpsertEdge,
)
from trinity.nosql.replica_set import (
    FailureDetector,
    MemberState,
    ReplicaSet,
    ReplicaSetView,
    choose_successor,
    heartbeat_tick,
    initial_view,
    promote,
)
from trinity.predicate import parse_predicate

OPS = ["=", "<", "<=", ">", ">=", "between"]


def random_doc(rng):
    doc = {}
    if rng.random() < 0.9:
        doc["a"] = rng.randrange(50)
    if rng.random() < 0.8:
        doc["b"] = rng.choice(["x", "y", "z", "w"])
    if rng.random() < 0.5:
        doc["c"] = rng.uniform(-10, 10)
    if rng.random() < 0.05:
        doc["a"] = "mixed"
    return doc


def random_terms(rng):
    terms = []
    for _ in range(rng.randint(0, 3)):
        field = rng.choice("abc")
        op = rng.choice(OPS)
        if field == "b":
            lo, hi = sorted(rng.sample(["w", "x", "y", "z"], 2))
        elif field == "a":
            lo, hi = sorted((rng.randrange(50), rng.randrange(50)))
        else:
            lo, hi = sorted((rng.uniform(-10, 10), rng.uniform(-10, 10)))
        if rng.random() < 0.03:
            lo = None
            op = "="
        terms.append((field, op, lo, hi) if op == "between" else (field, op, lo))
    return terms


def random_view(rng, n=4):
    members = tuple(f"n{i}" for i in range(n))
    states = {m: rng.choice(list(MemberState)) for m in members}
    primary = rng.choice(members)
    states[primary] = rng.choice([MemberState.SUSPECTED, MemberState.DOWN])
    applied = {m: rng.randrange(5) for m in members}
    return ReplicaSetView("rs", members, primary, rng.randint(1, 9), states, applied)


class TestDocuments:
    def test_empty(self):
        assert DocumentCollection().query() == []

    def test_id_equality_at_most_one(self):
        c = DocumentCollection()
        for i in range(10):
            c.upsert(str(i), {"v": i % 3})
        assert c.query(parse_predicate({"_id": "4"})) == [{"_id": "4", "v": 1}]
        assert c.query(parse_predicate({"_id": "nope"})) == []

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_linear_scan(self, seed):
        rng = random.Random(seed)
        c = DocumentCollection()
        docs = []
        for i in range(300):
            d = random_doc(rng)
            c.upsert(f"{i:04d}", d)
            docs.append({"_id": f"{i:04d}", **d})
        for _ in range(10):
            terms = random_terms(rng)
            assert c.query(parse_predicate(terms)) == filter_ref(docs, terms)

    def test_aggregate_and_order(self):
        c = DocumentCollection()
        for i, v in enumerate([5, None, 2, 9]):
            c.upsert(str(i), {} if v is None else {"v": v})
        assert [d.get("v") for d in c.query(order_by="v")] == [None, 2, 5, 9]
        assert c.query(aggregate=("max", "v")) == [{"max": 9}]
        assert c.query(aggregate=("count", None)) == [{"count": 4}]


class TestKeyValue:
    def test_put_get(self):
        kv = KeyValueStore()
        kv.put("k", 1)
        assert kv.get("k") == 1 and kv.get("missing") is None

    def test_empty_prefix_is_everything_sorted(self):
        kv = KeyValueStore()
        for k in ["b", "a", "c", "ab"]:
            kv.put(k, k.upper())
        assert kv.scan_prefix("") == [("a", "A"), ("ab", "AB"), ("b", "B"), ("c", "C")]

    def test_empty_key(self):
        with pytest.raises(TypeMismatch):
            KeyValueStore().put("", 1)

    @pytest.mark.parametrize("seed", range(10))
    def test_model(self, seed):
        rng = random.Random(seed)
        kv, ref = KeyValueStore(), KvRef()
        for _ in range(2000):
            k = "".join(rng.choice("abc") for _ in range(rng.randint(1, 4)))
            roll = rng.random()
            if roll < 0.5:
                kv.put(k, roll)
                ref.put(k, roll)
            elif roll < 0.75:
                kv.delete(k)
                ref.delete(k)
            elif roll < 0.9:
                assert kv.get(k) == ref.get(k)
            else:
                p = k[: rng.randint(0, len(k))]
                assert kv.scan_prefix(p) == ref.scan(p)
        assert kv.scan_prefix("") == ref.scan("")


class TestGraph:
    def test_isolated_node(self):
        g = GraphStore()
        g.upsert_node("a")
        assert g.neighbors("a", 3) == set()

    def test_chain_one_hop(self):
        g = GraphStore()
        g.upsert_edge("a", "b", "k")
        g.upsert_edge("b", "c", "k")
        assert g.neighbors("a", 1) == {("b", 1)}
        assert g.neighbors("a", 2) == {("b", 1), ("c", 2)}

    def test_errors(self):
        g = GraphStore()
        with pytest.raises(UnknownNode):
            g.neighbors("zz", 1)
        g.upsert_node("a")
        with pytest.raises(TypeMismatch):
            g.neighbors("a", 0)

    def test_delete_node_removes_incident_edges(self):
        g = GraphStore()
        g.upsert_edge("a", "b", "k")
        g.upsert_edge("b", "c", "k")
        g.delete_node("b")
        assert g.edges() == [] and g.neighbors("a", 5) == set()

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_bfs(self, seed):
        rng = random.Random(seed)
        n = rng.randint(1, 20)
        g = GraphStore()
        edges = set()
        for i in range(n):
            g.upsert_node(f"v{i}")
        for _ in range(rng.randint(0, 3 * n)):
            s, d = f"v{rng.randrange(n)}", f"v{rng.randrange(n)}"
            label = rng.choice("xy")
            g.upsert_edge(s, d, label)
            edges.add((s, d))
        for start in range(n):
            depth = rng.randint(1, 6)
            assert g.neighbors(f"v{start}", depth) == bfs_ref(edges, f"v{start}", depth)


class TestSpatioTemporal:
    def test_empty(self):
        assert SpatioTemporalStore().range((-1, -1, 1, 1), (0, 10)) == []

    def test_degenerate_box(self):
        st = SpatioTemporalStore()
        st.put("p", 10.0, 20.0, 5)
        st.put("q", 10.0, 20.5, 5)
        assert [p.point_id for p in st.range((10, 20, 10, 20), (5, 5))] == ["p"]

    def test_invalid_box(self):
        with pytest.raises(InvalidBox):
            SpatioTemporalStore().range((1, 0, 0, 1), (0, 1))
        with pytest.raises(InvalidBox):
            SpatioTemporalStore().range((0, 0, 1, 1), (5, 1))

    def test_coordinates_validated(self):
        st = SpatioTemporalStore()
        with pytest.raises(TypeMismatch):
            st.put("p", 181, 0, 0)
        with pytest.raises(TypeMismatch):
            st.put("p", 0, -90.5, 0)

    def test_move_replaces_point(self):
        st = SpatioTemporalStore()
        st.put("p", 0, 0, 1)
        st.put("p", 5, 5, 9)
        assert len(st) == 1
        assert st.range((-1, -1, 1, 1), (0, 100)) == []

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_linear_scan(self, seed):
        rng = random.Random(seed)
        st = SpatioTemporalStore()
        pts = {}
        for i in range(500):
            x, y, t = round(rng.uniform(-180, 180), 1), round(rng.uniform(-90, 90), 1), rng.randrange(1000)
            st.put(f"p{i}", x, y, t)
            pts[f"p{i}"] = (f"p{i}", x, y, t)
        for _ in range(20):
            x1, x2 = sorted((rng.uniform(-180, 180), rng.uniform(-180, 180)))
            y1, y2 = sorted((rng.uniform(-90, 90), rng.uniform(-90, 90)))
            t1, t2 = sorted((rng.randrange(1000), rng.randrange(1000)))
            got = {p.point_id for p in st.range((x1, y1, x2, y2), (t1, t2))}
            assert got == st_scan(pts.values(), (x1, y1, x2, y2), (t1, t2))


class TestNodeStores:
    def test_duplicate_source_lsn_ignored(self):
        s = NodeStores()
        op = UpsertDoc("c", "1", {"v": 1}, source_lsn=5, tenant="t")
        s.apply(op)
        assert s.is_duplicate(op)
        assert s.is_duplicate(UpsertDoc("c", "1", {"v": 2}, source_lsn=4, tenant="t"))
        assert not s.is_duplicate(UpsertDoc("c", "1", {"v": 2}, source_lsn=5, seq=1, tenant="t"))

    def test_unknown_collection(self):
        with pytest.raises(UnknownCollection):
            NodeStores().documents("nope")

    def test_digest_is_content_based(self):
        a, b = NodeStores(), NodeStores()
        for s, order in ((a, [1, 2]), (b, [2, 1])):
            for i in order:
                s.apply(KvPut("ns", f"k{i}", i, tenant="t"))
        assert a.digest() == b.digest()
        b.apply(MarkApplied("s0", 3))
        assert a.digest() != b.digest()


class TestPromotion:
    def test_single_healthy_secondary(self):
        v = initial_view("rs", ["n0", "n1"])
        v = ReplicaSetView("rs", v.members, "n0", 1, {"n0": MemberState.DOWN, "n1": MemberState.HEALTHY}, v.applied)
        p = promote(v)
        assert p.primary == "n1" and p.epoch == 2

    def test_max_applied_wins(self):
        v = ReplicaSetView("rs", ("n0", "n1", "n2"), "n0", 3,
                           {"n0": MemberState.SUSPECTED, "n1": MemberState.HEALTHY, "n2": MemberState.HEALTHY},
                           {"n0": 12, "n1": 7, "n2": 10})
        assert promote(v).primary == "n2"

    def test_tie_goes_to_smaller_id(self):
        v = ReplicaSetView("rs", ("n0", "n2", "n1"), "n0", 1,
                           {"n0": MemberState.DOWN, "n1": MemberState.HEALTHY, "n2": MemberState.HEALTHY},
                           {"n0": 0, "n1": 4, "n2": 4})
        assert promote(v).primary == "n1"

    def test_no_eligible(self):
        v = ReplicaSetView("rs", ("n0", "n1"), "n0", 1,
                           {"n0": MemberState.DOWN, "n1": MemberState.SUSPECTED}, {"n0": 0, "n1": 0})
        with pytest.raises(NoEligibleSecondary):
            promote(v)

    def test_healthy_primary_not_replaced(self):
        with pytest.raises(TrinityError):
            promote(initial_view("rs", ["a", "b"]))

    @pytest.mark.parametrize("seed", range(30))
    def test_argmax_rule_on_random_views(self, seed):
        v = random_view(random.Random(seed))
        healthy = [m for m in v.members if m != v.primary and v.states[m] is MemberState.HEALTHY]
        if not healthy:
            with pytest.raises(NoEligibleSecondary):
                choose_successor(v)
            return
        expected = sorted(healthy, key=lambda m: (-v.applied[m], m))[0]
        p = promote(v)
        assert p.primary == expected and p.epoch == v.epoch + 1
        assert p.states[v.primary] is MemberState.DOWN


class TestHeartbeats:
    def test_fresh_heartbeats_all_healthy(self):
        v = initial_view("rs", ["a", "b", "c"])
        d = FailureDetector(500)
        for m in v.members:
            d.heartbeat(m, 1000)
        assert heartbeat_tick(v, d, 1100) is v

    def test_silent_600_ms_is_suspected(self):
        v = initial_view("rs", ["a", "b"])
        d = FailureDetector(500)
        d.heartbeat("a", 0)
        d.heartbeat("b", 0)
        d.heartbeat("a", 600)
        v2 = heartbeat_tick(v, d, 600)
        assert v2.states["a"] is MemberState.HEALTHY and v2.states["b"] is MemberState.SUSPECTED

    def test_exactly_timeout_is_not_silent(self):
        d = FailureDetector(500)
        d.heartbeat("a", 0)
        assert not d.silent("a", 500) and d.silent("a", 501)

    def test_suspected_member_recovers(self):
        v = initial_view("rs", ["a", "b"])
        d = FailureDetector(500)
        d.heartbeat("a", 0)
        d.heartbeat("b", 0)
        v = heartbeat_tick(v, d, 700)
        assert v.states["b"] is MemberState.SUSPECTED
        d.heartbeat("a", 800)
        d.heartbeat("b", 800)
        v = heartbeat_tick(v, d, 800)
        assert v.states["b"] is MemberState.HEALTHY

    def test_held_member_stays_suspected(self):
        v = initial_view("rs", ["a", "b"])
        d = FailureDetector(500)
        v = heartbeat_tick(v, d, 10)
        d.heartbeat("a", 20)
        d.heartbeat("b", 20)
        v = heartbeat_tick(v, d, 20, hold={"b"})
        assert v.states["a"] is MemberState.HEALTHY and v.states["b"] is MemberState.SUSPECTED


def doc_op(i, lsn=None):
    return UpsertDoc("c", str(i % 37), {"v": i}, source_lsn=lsn, tenant="t")


class TestReplicaSet:
    def make(self, n=3):
        return ReplicaSet("rs", [f"n{i}" for i in range(n)])

    def test_thousand_upserts_reach_secondary(self):
        rs = self.make()
        for i in range(1000):
            rs.apply(doc_op(i, i + 1))
        rs.replicate()
        primary = rs.nodes["n0"]
        for m in ("n1", "n2"):
            assert rs.nodes[m].applied_lsn == 1000
            assert rs.query_documents("c", member=m) == rs.query_documents("c", member="n0")
            assert rs.nodes[m].digest() == primary.digest()

    def test_duplicate_source_lsn(self):
        rs = self.make()
        rs.apply(doc_op(1, 1))
        before = rs.nodes["n0"].digest()
        assert rs.apply(doc_op(1, 1)) == 1
        assert rs.nodes["n0"].digest() == before

    def test_stale_epoch_fenced(self):
        rs = self.make()
        rs.crash("n0")
        rs.detector.heartbeat("n1", 1000)
        rs.detector.heartbeat("n2", 1000)
        rs.tick(1000)
        assert rs.epoch == 2
        with pytest.raises(StaleEpoch):
            rs.apply(doc_op(1), epoch=1)
        with pytest.raises(NotPrimary) as info:
            rs.apply(doc_op(1), node="n0")
        assert info.value.current_epoch == 2

    def test_query_annotated_with_applied_lsn(self):
        rs = self.make()
        for i in range(5):
            rs.apply(doc_op(i, i + 1))
        rs.replicate(max_entries=2)
        docs, lsn = rs.query_documents("c", member="n1")
        assert lsn == 2 and len(docs) == 2
        with pytest.raises(UnknownCollection):
            rs.query_documents("missing")

    def test_crashed_member_unavailable(self):
        rs = self.make()
        rs.crash("n2")
        with pytest.raises(NodeUnavailable):
            rs.member("n2")
        with pytest.raises(UnknownNode):
            rs.node("n9")

    def test_rejoin_caught_up_is_empty(self):
        rs = self.make()
        rs.apply(doc_op(1, 1))
        rs.replicate()
        plan = rs.rejoin("n1")
        assert len(plan) == 0 and plan.discarded == ()

    def test_rejoin_plan_interval(self):
        rs = self.make()
        for i in range(5):
            rs.apply(doc_op(i, i + 1))
        rs.replicate()
        rs.crash("n1")
        for i in range(5, 9):
            rs.apply(doc_op(i, i + 1))
        plan = rs.rejoin("n1")
        assert (plan.from_lsn, plan.to_lsn) == (5, 9)
        assert rs.view.states["n1"] is MemberState.SUSPECTED
        rs.replicate()
        assert "n1" not in rs.recovering

    def test_rejoin_needs_primary(self):
        rs = ReplicaSet("rs", ["a"])
        with pytest.raises(NoPrimary):
            rs.rejoin("a")

    def test_crash_promote_rejoin_discards_divergent_suffix(self):
        rs = self.make()
        for i in range(10):
            rs.apply(doc_op(i, i + 1))
        rs.replicate()
        for i in range(10, 13):   # accepted by n0, never shipped
            rs.apply(doc_op(i, i + 1))
        rs.crash("n0")
        for m in ("n1", "n2"):
            rs.detector.heartbeat(m, 900)
        rs.tick(900)
        assert rs.primary == "n1" and rs.epoch == 2
        for i in range(13, 16):
            rs.apply(doc_op(i, i + 1))
        plan = rs.rejoin("n0")
        assert [e.lsn for e in plan.discarded] == [11, 12, 13]
        rs.replicate()
        digests = {n.digest() for n in rs.nodes.values()}
        logs = {tuple((e.lsn, e.epoch) for e in n.oplog) for n in rs.nodes.values()}
        assert len(digests) == 1 and len(logs) == 1

    def test_add_and_remove_member(self):
        rs = self.make(2)
        for i in range(4):
            rs.apply(doc_op(i, i + 1))
        plan = rs.add_member("n9")
        assert plan.to_lsn == 4 and "n9" in rs.view.members
        rs.replicate()
        assert rs.nodes["n9"].applied_lsn == 4
        rs.remove_member("n9")
        assert "n9" not in rs.view.members
        with pytest.raises(TrinityError):
            rs.remove_member("n0")

    def test_listeners_see_accepted_ops_only(self):
        rs = self.make()
        seen = []
        rs.listeners.append(lambda rs_id, op, lsn: seen.append(lsn))
        rs.apply(doc_op(1, 1))
        rs.apply(doc_op(1, 1))
        assert seen == [1]

    def test_graph_ops_replicate(self):
        rs = self.make()
        rs.apply(UpsertEdge("g", "a", "b", "k", tenant="t"))
        rs.replicate()
        assert rs.nodes["n2"].stores.graph("g", "t").neighbors("a", 1) == {("b", 1)}

    def test_describe(self):
        assert self.make().describe() == (
            "replica_set=rs epoch=1 primary=n0 members=n0:Healthy:0* n1:Healthy:0 n2:Healthy:0"
        )
