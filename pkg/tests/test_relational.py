import os
import random
import struct
import zlib
from decimal import Decimal

import pytest
from conftest import structured

from trinity.data_model import Catalog, CrudOp, compile_dictionary
from trinity.errors import (
    AlreadyFinished,
    Conflict,
    CorruptLog,
    EngineClosed,
    LsnGap,
    NotMaster,
    OpNotAllowed,
    PrimaryKeyViolation,
    RowNotFound,
    TypeMismatch,
)
from trinity.relational.binlog import BinlogFile, LogOp, LogRecord, encode_record, read_file, scan
from trinity.relational.engine import Delete, Insert, RelationalEngine, Select, TxnState, Update, statement_from_doc
from trinity.values import Scalar, coerce, decode_row, encode_row


def order(i, amount=10, region="eu", cust=None):
    return {"id": i, "amount": amount, "region": region, "cust": cust}


def random_workload(engine, rng, txns=60, tenants=("t1", "t2")):
    live = {t: set() for t in tenants}
    next_id = 0
    for _ in range(txns):
        t = rng.choice(tenants)
        stmts = []
        for _ in range(rng.randint(1, 3)):
            roll = rng.random()
            if roll < 0.5 or not live[t]:
                next_id += 1
                stmts.append(Insert("orders", order(next_id, rng.randrange(1000))))
                live[t].add(next_id)
            elif roll < 0.8:
                stmts.append(Update("orders", rng.choice(sorted(live[t])), {"amount": rng.randrange(1000)}))
            else:
                k = rng.choice(sorted(live[t]))
                stmts.append(Delete("orders", k))
                live[t].discard(k)
        txn = engine.begin(t)
        for s in stmts:
            engine.execute(txn, s)
        if rng.random() < 0.15:
            engine.abort(txn)
            # undo the bookkeeping of an aborted transaction: resync from the engine
            live = {tt: {k[1][0] for k in engine.tables.get("orders", {}) if k[0] == tt} for tt in tenants}
        else:
            engine.commit(txn)


class TestValues:
    @pytest.mark.parametrize("scalar,raw,expected", [
        (Scalar.INT64, 5, 5),
        (Scalar.DECIMAL, "1.50", Decimal("1.50")),
        (Scalar.DECIMAL, 3, Decimal(3)),
        (Scalar.TEXT, "x", "x"),
        (Scalar.BOOL, True, True),
        (Scalar.TIMESTAMP_MILLIS, 1700000000000, 1700000000000),
        (Scalar.GEOPOINT, [1, 2.5], (1.0, 2.5)),
        (Scalar.GEOPOINT, {"x": 3, "y": 4}, (3.0, 4.0)),
    ])
    def test_coerce_accepts(self, scalar, raw, expected):
        assert coerce(scalar, raw) == expected

    @pytest.mark.parametrize("scalar,raw", [
        (Scalar.INT64, "5"), (Scalar.INT64, True), (Scalar.INT64, 2**63),
        (Scalar.TEXT, 1), (Scalar.BOOL, 1), (Scalar.DECIMAL, "abc"), (Scalar.GEOPOINT, [1]),
    ])
    def test_coerce_rejects(self, scalar, raw):
        with pytest.raises(TypeMismatch):
            coerce(scalar, raw)

    def test_row_codec_round_trip(self):
        row = {"a": 1, "b": None, "c": "héllo", "d": Decimal("-2.25"), "e": False, "f": (1.5, -3.0)}
        buf = encode_row(row)
        back, pos = decode_row(buf, 0)
        assert back == row and pos == len(buf)
        assert decode_row(encode_row(None), 0) == (None, 1)


class TestBinlogFormat:
    def test_commit_record_bytes(self):
        rec = LogRecord(7, 3, "t1", "", LogOp.COMMIT)
        body = struct.pack("<QQB", 7, 3, 4) + struct.pack("<H", 2) + b"t1" + struct.pack("<H", 0) + b"\x00\x00"
        expected = struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))
        assert encode_record(rec) == expected

    def test_insert_record_layout(self):
        rec = LogRecord(1, 1, "t", "orders", LogOp.INSERT, None, {"id": 1})
        buf = encode_record(rec)
        (length,) = struct.unpack_from("<I", buf, 0)
        assert len(buf) == 4 + length + 4
        assert struct.unpack_from("<QQB", buf, 4) == (1, 1, 1)
        (crc,) = struct.unpack_from("<I", buf, 4 + length)
        assert crc == zlib.crc32(buf[4:4 + length])

    def test_scan_round_trip(self):
        recs = [
            LogRecord(1, 1, "t", "orders", LogOp.INSERT, None, order(1)),
            LogRecord(2, 1, "t", "orders", LogOp.UPDATE, order(1), order(1, 20)),
            LogRecord(3, 1, "t", "", LogOp.COMMIT),
        ]
        report = scan(b"".join(encode_record(r) for r in recs))
        assert report.records == recs and report.torn_records == 0

    def test_every_truncation_point_recovers_a_prefix(self):
        recs = []
        lsn = 0
        for txn in range(1, 4):
            lsn += 1
            recs.append(LogRecord(lsn, txn, "t", "orders", LogOp.INSERT, None, order(txn)))
            lsn += 1
            recs.append(LogRecord(lsn, txn, "t", "", LogOp.COMMIT))
        blob = b"".join(encode_record(r) for r in recs)
        ends = []
        pos = 0
        for r in recs:
            pos += len(encode_record(r))
            ends.append(pos)
        for cut in range(len(blob) + 1):
            report = scan(blob[:cut])
            whole = sum(1 for e in ends if e <= cut)
            committed = whole - (whole % 2)
            assert report.records == recs[:committed]
            assert report.torn_records == (0 if cut in (0, *ends) else 1)
            assert report.valid_bytes == (ends[committed - 1] if committed else 0)

    def test_mid_file_corruption_is_fatal(self):
        recs = [LogRecord(i, i, "t", "", LogOp.COMMIT) for i in range(1, 4)]
        blob = bytearray(b"".join(encode_record(r) for r in recs))
        blob[10] ^= 0xFF
        with pytest.raises(CorruptLog):
            scan(bytes(blob))

    def test_corrupt_last_record_counts_as_torn(self):
        recs = [LogRecord(i, i, "t", "", LogOp.COMMIT) for i in range(1, 3)]
        blob = bytearray(b"".join(encode_record(r) for r in recs))
        blob[-1] ^= 0xFF
        report = scan(bytes(blob))
        assert report.records == recs[:1] and report.torn_records == 1

    def test_file_truncated_on_open(self, tmp_path):
        path = str(tmp_path / "x.binlog")
        f = BinlogFile(path)
        f.append([LogRecord(1, 1, "t", "", LogOp.COMMIT)])
        f.close()
        good = os.path.getsize(path)
        with open(path, "ab") as fh:
            fh.write(b"\x30\x00\x00\x00partial")
        f = BinlogFile(path)
        f.close()
        assert os.path.getsize(path) == good
        assert len(read_file(path).records) == 1

    def test_bad_durability(self, tmp_path):
        with pytest.raises(ValueError):
            BinlogFile(str(tmp_path / "y"), "sometimes")


class TestTransactions:
    def test_begin_gives_distinct_ids(self, catalog):
        e = RelationalEngine("n", catalog)
        assert e.begin("t").txn_id != e.begin("t").txn_id

    def test_begin_on_closed(self, catalog):
        e = RelationalEngine("n", catalog)
        e.close()
        with pytest.raises(EngineClosed):
            e.begin("t")

    def test_abort_state(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        e.abort(t)
        assert t.state is TxnState.ABORTED

    def test_read_your_writes(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        e.execute(t, Insert("orders", order(1)))
        assert e.execute(t, Select("orders", (("id", "=", 1),))) == [order(1)]

    def test_duplicate_insert(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t", [Insert("orders", order(1))])
        with pytest.raises(PrimaryKeyViolation):
            e.run("t", [Insert("orders", order(1))])

    def test_same_key_different_tenants(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t1", [Insert("orders", order(1))])
        e.run("t2", [Insert("orders", order(1, 99))])
        assert e.get("t2", "orders", 1)["amount"] == 99

    def test_update_and_delete_missing(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        with pytest.raises(RowNotFound):
            e.execute(t, Update("orders", 5, {"amount": 1}))
        with pytest.raises(RowNotFound):
            e.execute(t, Delete("orders", 5))

    def test_type_mismatch(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        with pytest.raises(TypeMismatch):
            e.execute(t, Insert("orders", {"id": "one", "amount": 1, "region": "x"}))
        with pytest.raises(TypeMismatch):
            e.execute(t, Insert("orders", {"id": 1, "region": "x"}))
        with pytest.raises(TypeMismatch):
            e.execute(t, Insert("orders", {**order(1), "bogus": 1}))

    def test_primary_key_is_immutable(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t", [Insert("orders", order(1))])
        with pytest.raises(TypeMismatch):
            e.run("t", [Update("orders", 1, {"id": 2})])

    def test_op_not_allowed(self):
        s = structured("ledger", [("id", "Int64")], ["id"], allowed_ops=frozenset({CrudOp.CREATE, CrudOp.RETRIEVE}))
        e = RelationalEngine("n", Catalog(compile_dictionary([s])))
        e.run("t", [Insert("ledger", {"id": 1})])
        with pytest.raises(OpNotAllowed):
            e.run("t", [Delete("ledger", 1)])

    def test_empty_commit_logs_only_commit(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        assert e.commit(t) == 1
        assert [r.op for r in e.log] == [LogOp.COMMIT]
        assert t.state is TxnState.COMMITTED

    def test_commit_after_abort(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        e.abort(t)
        with pytest.raises(AlreadyFinished):
            e.commit(t)
        with pytest.raises(AlreadyFinished):
            e.execute(t, Select("orders"))

    def test_first_committer_wins(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t", [Insert("accounts", {"id": 1, "balance": 100})])
        a, b = e.begin("t"), e.begin("t")
        e.execute(a, Update("accounts", 1, {"balance": 90}))
        e.execute(b, Update("accounts", 1, {"balance": 80}))
        e.commit(a)
        with pytest.raises(Conflict):
            e.commit(b)
        assert b.state is TxnState.ABORTED
        assert e.get("t", "accounts", 1)["balance"] == 90

    def test_phantom_on_scanned_predicate(self, catalog):
        e = RelationalEngine("n", catalog)
        a, b = e.begin("t"), e.begin("t")
        e.execute(a, Select("orders", (("amount", ">", 50),)))
        e.execute(b, Insert("orders", order(1, 60)))
        e.commit(b)
        e.execute(a, Insert("orders", order(2, 5)))
        with pytest.raises(Conflict):
            e.commit(a)

    def test_disjoint_writers_both_commit(self, catalog):
        e = RelationalEngine("n", catalog)
        a, b = e.begin("t"), e.begin("t")
        e.execute(a, Insert("orders", order(1)))
        e.execute(b, Insert("orders", order(2)))
        e.commit(a)
        e.commit(b)
        assert len(e.select("t", "orders")) == 2

    def test_aborted_transaction_leaves_no_trace(self, catalog):
        e = RelationalEngine("n", catalog)
        t = e.begin("t")
        e.execute(t, Insert("orders", order(1)))
        e.abort(t)
        assert e.select("t", "orders") == [] and e.log == []

    def test_select_predicate_order_and_aggregate(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t", [Insert("orders", order(i, amount=100 - i)) for i in range(1, 6)])
        rows = e.select("t", "orders", [("amount", "between", 96, 98)], order_by="amount")
        assert [r["id"] for r in rows] == [4, 3, 2]
        assert e.select("t", "orders", aggregate=("sum", "amount")) == [{"sum": 485}]

    def test_statement_from_doc(self):
        assert statement_from_doc({"op": "insert", "entity": "o", "row": {"id": 1}}) == Insert("o", {"id": 1})
        assert statement_from_doc({"op": "Delete", "entity": "o", "pk": 3}) == Delete("o", 3)
        sel = statement_from_doc({"op": "select", "entity": "o", "predicate": {"a": 1}, "aggregate": ["count", None]})
        assert sel.aggregate == ("count", None) and sel.predicate[0].field == "a"
        with pytest.raises(TypeMismatch):
            statement_from_doc({"op": "merge", "entity": "o"})


class TestLog:
    def test_read_log_beyond_tail(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t", [Insert("orders", order(1))])
        assert e.read_log(99, 10) == []

    def test_chunking_identity(self, catalog):
        e = RelationalEngine("n", catalog)
        random_workload(e, random.Random(1), 30)
        whole = e.read_log(1)
        chunks, lsn = [], 1
        while True:
            part = e.read_log(lsn, 2)
            if not part:
                break
            chunks += part
            lsn += 2
        assert chunks == whole

    def test_three_single_insert_transactions(self, catalog):
        e = RelationalEngine("n", catalog)
        for i in range(3):
            e.run("t", [Insert("orders", order(i))])
        log = e.read_log(1)
        assert [r.lsn for r in log] == [1, 2, 3, 4, 5, 6]
        assert [r.op for r in log] == [LogOp.INSERT, LogOp.COMMIT] * 3

    def test_record_shapes(self, catalog):
        e = RelationalEngine("n", catalog)
        e.run("t", [Insert("orders", order(1))])
        e.run("t", [Update("orders", 1, {"amount": 5})])
        e.run("t", [Delete("orders", 1)])
        data = [r for r in e.log if r.is_data]
        assert data[0].before is None and data[0].after is not None
        assert data[1].before["id"] == data[1].after["id"] == 1
        assert data[2].before is not None and data[2].after is None

    def test_replay_reproduces_state(self, catalog):
        e = RelationalEngine("n", catalog)
        random_workload(e, random.Random(2), 80)
        fresh = RelationalEngine("r", catalog, role="slave")
        fresh.apply_replica(e.read_log(1))
        assert fresh.snapshot() == e.snapshot()


class TestReplicaApply:
    def test_idempotent(self, catalog):
        m = RelationalEngine("m", catalog)
        random_workload(m, random.Random(3), 20)
        s = RelationalEngine("s", catalog, role="slave")
        batch = m.read_log(1)
        first = s.apply_replica(batch)
        snap = s.snapshot()
        assert s.apply_replica(batch) == first and s.snapshot() == snap

    def test_gap(self, catalog):
        m = RelationalEngine("m", catalog)
        for i in range(3):
            m.run("t", [Insert("orders", order(i))])
        s = RelationalEngine("s", catalog, role="slave")
        s.apply_replica(m.read_log(1, 2))
        with pytest.raises(LsnGap):
            s.apply_replica(m.read_log(4))

    @pytest.mark.parametrize("seed", range(5))
    def test_shipped_replica_is_byte_equal(self, catalog, seed):
        m = RelationalEngine("m", catalog)
        random_workload(m, random.Random(seed), 100)
        s = RelationalEngine("s", catalog, role="slave")
        lsn = 1
        rng = random.Random(seed + 100)
        while lsn <= m.last_lsn:
            n = rng.randint(1, 7)
            s.apply_replica(m.read_log(lsn, n))
            lsn += n
        assert s.snapshot_bytes() == m.snapshot_bytes()

    def test_slave_refuses_writes_and_plain_reads(self, catalog):
        s = RelationalEngine("s", catalog, role="slave")
        with pytest.raises(NotMaster):
            s.begin("t")
        with pytest.raises(NotMaster):
            s.select("t", "orders")
        assert s.select("t", "orders", stale_ok=True) == []

    def test_promote_aborts_cut_transaction(self, catalog):
        m = RelationalEngine("m", catalog)
        m.run("t", [Insert("orders", order(1)), Insert("orders", order(2))])
        s = RelationalEngine("s", catalog, role="slave")
        s.apply_replica(m.read_log(1, 2))   # first insert only, no commit
        s.promote()
        assert s.role == "master"
        assert s.log[-1].op is LogOp.ABORT
        assert s.select("t", "orders") == []
        s.run("t", [Insert("orders", order(3))])
        assert [r["id"] for r in s.select("t", "orders")] == [3]

    def test_demote_aborts_open_transactions(self, catalog):
        m = RelationalEngine("m", catalog)
        t = m.begin("t")
        m.demote()
        assert t.state is TxnState.ABORTED
        with pytest.raises(NotMaster):
            m.begin("t")


class TestDurability:
    def test_restart_recovers_committed_state(self, tmp_path, catalog):
        path = str(tmp_path / "m.binlog")
        e = RelationalEngine("m", catalog, binlog_path=path, durability="strict")
        random_workload(e, random.Random(4), 40)
        snap, lsn = e.snapshot(), e.last_lsn
        e.close()
        again = RelationalEngine("m", catalog, binlog_path=path)
        assert again.snapshot() == snap and again.last_lsn == lsn
        again.run("t1", [Insert("orders", order(10_000))])
        assert again.last_lsn == lsn + 2

    def test_uncommitted_tail_discarded(self, tmp_path, catalog):
        path = str(tmp_path / "m.binlog")
        e = RelationalEngine("m", catalog, binlog_path=path)
        e.run("t", [Insert("orders", order(1))])
        e.close()
        with open(path, "ab") as fh:
            fh.write(encode_record(LogRecord(3, 9, "t", "orders", LogOp.INSERT, None, order(2))))
        again = RelationalEngine("m", catalog, binlog_path=path)
        assert again.recovery.discarded_records == 1
        assert [r["id"] for r in again.select("t", "orders")] == [1]
