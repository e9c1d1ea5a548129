import json
import socket
import threading

import pytest
from conftest import orders_schema, unstructured

from trinity.config import Config
from trinity.data_model import Variant, schema_to_doc
from trinity.relational.engine import Insert
from trinity.service import OpenTxn, Server, Service, Session


@pytest.fixture
def svc(tmp_path):
    return Service(Config(shards=2, data_dir=str(tmp_path)))


class Wire:
    """Drives one session through handle_message with increasing ids."""

    def __init__(self, service):
        self.service, self.session, self.n = service, Session(), 0

    def __call__(self, verb, **body):
        self.n += 1
        resp = self.service.handle_message({"id": self.n, "verb": verb, "body": body}, self.session)
        assert resp["id"] == self.n
        return resp

    def ok(self, verb, **body):
        resp = self(verb, **body)
        assert resp["ok"], resp
        return resp["body"]


def apply_orders(w):
    return w.ok("schema.apply", schemas=[schema_to_doc(orders_schema())])


def insert_txn(w, *ids):
    tid = w.ok("txn.begin", tenant="t1")["txn_id"]
    for i in ids:
        w.ok("txn.exec", txn_id=tid, statement={"op": "insert", "entity": "orders",
                                                "row": {"id": i, "amount": i, "region": "n"}})
    return w.ok("txn.commit", txn_id=tid)


class TestProtocol:
    def test_unknown_verb(self, svc):
        resp = svc.handle_message({"id": 77, "verb": "frobnicate", "body": {}})
        assert resp["id"] == 77 and not resp["ok"]
        assert resp["error"]["code"] == "UNKNOWN_VERB"

    @pytest.mark.parametrize("msg", [[], {"verb": "query"}, {"id": "1", "verb": "query"},
                                     {"id": 1}, {"id": 1, "verb": "query", "body": []}])
    def test_malformed(self, svc, msg):
        resp = svc.handle_message(msg)
        assert resp["error"]["code"] == "MALFORMED_MESSAGE"

    def test_bad_json_line(self, svc):
        resp = json.loads(svc.handle_line("{not json", Session()))
        assert resp["id"] is None and resp["error"]["code"] == "MALFORMED_MESSAGE"

    def test_missing_field_is_malformed(self, svc):
        resp = Wire(svc)("txn.begin")
        assert resp["error"]["code"] == "MALFORMED_MESSAGE"

    def test_engine_error_is_wrapped(self, svc):
        resp = Wire(svc)("query", tenant="t1", entity="ghost")
        assert resp["error"]["code"] == "UNKNOWN_ENTITY" and resp["error"]["message"]


class TestVerbs:
    def test_txn_begin_fresh_ids(self, svc):
        w = Wire(svc)
        a, b = w.ok("txn.begin", tenant="t1")["txn_id"], w.ok("txn.begin", tenant="t1")["txn_id"]
        assert a != b

    def test_scripted_session(self, svc):
        w = Wire(svc)
        assert apply_orders(w)["entities"] == ["orders"]
        for i in (1, 2, 3):
            insert_txn(w, i)
        w.ok("admin.drain")
        rows = w.ok("query", tenant="t1", entity="orders")["rows"]
        assert sorted(r["id"] for r in rows) == [1, 2, 3]
        direct = []
        for s in svc.cluster.shard_map.shards:
            rs = svc.cluster.replica_sets[svc.cluster.shard_map.replica_set_of[s]]
            direct += [d for _, d in rs.nodes[rs.primary].stores.documents("orders")]
        assert sorted(rows, key=lambda r: r["id"]) == sorted(direct, key=lambda r: r["id"])

    def test_abort_discards(self, svc):
        w = Wire(svc)
        apply_orders(w)
        tid = w.ok("txn.begin", tenant="t1")["txn_id"]
        w.ok("txn.exec", txn_id=tid, statement={"op": "insert", "entity": "orders",
                                                "row": {"id": 5, "amount": 1, "region": "s"}})
        w.ok("txn.abort", txn_id=tid)
        assert w.ok("query", tenant="t1", entity="orders", kind="OLTP")["rows"] == []
        assert w("txn.commit", txn_id=tid)["error"]["code"] == "MALFORMED_MESSAGE"

    def test_cross_shard_txn_refused(self, svc):
        w = Wire(svc)
        apply_orders(w)
        owners = {}
        for i in range(50):
            owners.setdefault(svc._shard_of(OpenTxn("t1"), Insert("orders", {"id": i})), i)
        a, b = list(owners.values())[:2]
        tid = w.ok("txn.begin", tenant="t1")["txn_id"]
        w.ok("txn.exec", txn_id=tid, statement={"op": "insert", "entity": "orders",
                                                "row": {"id": a, "amount": 1, "region": "s"}})
        resp = w("txn.exec", txn_id=tid, statement={"op": "insert", "entity": "orders",
                                                    "row": {"id": b, "amount": 1, "region": "s"}})
        assert resp["error"]["code"] == "CROSS_SHARD_TRANSACTION"

    def test_aggregate_and_order(self, svc):
        w = Wire(svc)
        apply_orders(w)
        for i in range(1, 7):
            insert_txn(w, i)
        w.ok("admin.drain")
        assert w.ok("query", tenant="t1", entity="orders", aggregate=["sum", "amount"])["rows"] == [{"sum": 21}]
        rows = w.ok("query", tenant="t1", entity="orders", order_by="amount",
                    predicate=[["amount", ">", 2]])["rows"]
        assert [r["amount"] for r in rows] == [3, 4, 5, 6]

    def test_kv_roundtrip(self, svc):
        w = Wire(svc)
        w.ok("schema.apply", schema=schema_to_doc(unstructured("sess", Variant.KEY_VALUE)))
        w.ok("kv.put", tenant="t1", ns="sess", key="a1", value={"u": 1})
        w.ok("kv.put", tenant="t1", ns="sess", key="a2", value=2)
        w.ok("kv.put", tenant="t1", ns="sess", key="b1", value=3)
        assert w.ok("kv.get", tenant="t1", ns="sess", key="a1") == {"found": True, "value": {"u": 1}}
        assert w.ok("kv.scan", tenant="t1", ns="sess", prefix="a")["items"] == [["a1", {"u": 1}], ["a2", 2]]
        w.ok("kv.delete", tenant="t1", ns="sess", key="a1")
        assert w.ok("kv.get", tenant="t1", ns="sess", key="a1")["found"] is False

    def test_graph_and_spatial(self, svc):
        w = Wire(svc)
        w.ok("schema.apply", schemas=[schema_to_doc(unstructured("g", Variant.GRAPH)),
                                      schema_to_doc(unstructured("pts", Variant.SPATIAL_TEMPORAL))])
        for a, b in [("a", "b"), ("b", "c"), ("c", "d")]:
            w.ok("graph.edge", tenant="t1", graph="g", src=a, dst=b)
        assert w.ok("graph.neighbors", tenant="t1", graph="g", start="a", depth=2)["nodes"] == [["b", 1], ["c", 2]]
        w.ok("st.put", tenant="t1", layer="pts", id="p1", x=1.0, y=1.0, t=5)
        w.ok("st.put", tenant="t1", layer="pts", id="p2", x=9.0, y=9.0, t=5)
        pts = w.ok("st.range", tenant="t1", layer="pts", box=[0, 0, 2, 2], interval=[0, 10])["points"]
        assert [p["id"] for p in pts] == ["p1"]

    def test_admin_verbs(self, svc):
        w = Wire(svc)
        for verb in ("admin.shards", "admin.replsets", "admin.cache", "admin.autoscale", "admin.lag"):
            assert w.ok(verb)["text"]
        assert "lag_records=0" in w.ok("admin.lag")["text"][0]

    def test_close_session_aborts_open_txns(self, svc):
        w = Wire(svc)
        apply_orders(w)
        tid = w.ok("txn.begin", tenant="t1")["txn_id"]
        w.ok("txn.exec", txn_id=tid, statement={"op": "insert", "entity": "orders",
                                                "row": {"id": 1, "amount": 1, "region": "s"}})
        svc.close_session(w.session)
        assert not w.session.txns


class TestServer:
    def test_ndjson_over_tcp(self, tmp_path):
        svc = Service(Config(port=0, data_dir=str(tmp_path)))
        server = Server(svc)
        t = threading.Thread(target=server.serve, daemon=True)
        t.start()
        try:
            with socket.create_connection(server.server_address[:2], timeout=5) as sock:
                f = sock.makefile("rwb")
                for i, verb in enumerate(["admin.shards", "nope", "admin.cache"], 1):
                    f.write((json.dumps({"id": i, "verb": verb}) + "\n").encode())
                f.flush()
                replies = [json.loads(f.readline()) for _ in range(3)]
            assert [r["id"] for r in replies] == [1, 2, 3]
            assert [r["ok"] for r in replies] == [True, False, True]
        finally:
            server.shutdown()
            server.server_close()
