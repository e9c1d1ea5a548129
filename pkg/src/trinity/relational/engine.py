"""Single-shard relational store with optimistic serializable transactions.

Statements run against the committed state plus the transaction's own
buffered writes. At commit, the engine checks every transaction that
committed after this one began: if any of them wrote a row this transaction
read (point reads, or rows matching a scanned predicate before or after the
write), the commit fails with Conflict. Survivors are serialized in commit
order, so the committed history is equivalent to that serial order.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from ..data_model import CrudOp, DataDictionary, EngineKind
from ..errors import (
    AlreadyFinished,
    Conflict,
    EngineClosed,
    LsnGap,
    NotMaster,
    OpNotAllowed,
    PrimaryKeyViolation,
    RowNotFound,
    TypeMismatch,
    UnknownEntity,
)
from ..predicate import matches, parse_predicate, run_query
from ..values import coerce, encode_row
from .binlog import BinlogFile, LogOp, LogRecord


class TxnState(str, Enum):
    ACTIVE = "Active"
    COMMITTED = "Committed"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class Insert:
    entity: str
    row: dict


@dataclass(frozen=True)
class Update:
    entity: str
    pk: Any
    changes: dict


@dataclass(frozen=True)
class Delete:
    entity: str
    pk: Any


@dataclass(frozen=True)
class Select:
    entity: str
    predicate: tuple = ()
    order_by: str | None = None
    aggregate: tuple | None = None


def statement_from_doc(doc: dict):
    op = str(doc.get("op", "")).lower()
    entity = doc.get("entity")
    if not isinstance(entity, str):
        raise TypeMismatch("statement needs an entity")
    if op == "insert":
        return Insert(entity, dict(doc.get("row") or {}))
    if op == "update":
        return Update(entity, doc.get("pk"), dict(doc.get("changes") or {}))
    if op == "delete":
        return Delete(entity, doc.get("pk"))
    if op == "select":
        agg = doc.get("aggregate")
        return Select(entity, parse_predicate(doc.get("predicate")), doc.get("order_by"),
                      tuple(agg) if agg else None)
    raise TypeMismatch(f"unknown statement op {op!r}")


@dataclass
class TxnHandle:
    txn_id: int
    tenant_id: str
    start_seq: int
    state: TxnState = TxnState.ACTIVE
    writes: dict = field(default_factory=dict)   # (entity, key) -> row | None
    reads: set = field(default_factory=set)      # (entity, key)
    scans: list = field(default_factory=list)    # (entity, predicate)


@dataclass
class _Committed:
    seq: int
    tenant_id: str
    writes: dict  # (entity, key) -> (before, after)


def pk_key(schema, pk) -> tuple:
    names = schema.primary_key
    if isinstance(pk, dict):
        values = [pk.get(n) for n in names]
    elif len(names) == 1:
        values = [pk[0]] if isinstance(pk, (list, tuple)) and len(pk) == 1 else [pk]
    else:
        values = list(pk) if isinstance(pk, (list, tuple)) else [pk]
    if len(values) != len(names):
        raise TypeMismatch(f"{schema.entity}: key needs {len(names)} values")
    out = []
    for n, v in zip(names, values):
        if v is None:
            raise TypeMismatch(f"{schema.entity}: key field {n} is null")
        out.append(coerce(schema.field(n).scalar, v))
    return tuple(out)


def row_key(schema, row: dict) -> tuple:
    return tuple(row[n] for n in schema.primary_key)


class RelationalEngine:
    """One shard node. ``role`` is ``master`` (accepts transactions) or
    ``slave`` (applies shipped log records, serves ``stale_ok`` reads)."""

    def __init__(self, node_id: str, catalog, role: str = "master",
                 binlog_path: str | None = None, durability: str = "relaxed",
                 clock: Callable[[], int] | None = None):
        self.node_id = node_id
        self._catalog = catalog
        self.role = role
        self.clock = clock or (lambda: 0)
        self._lock = threading.RLock()
        self.tables: dict[str, dict[tuple, dict]] = {}
        self.log: list[LogRecord] = []
        self.commit_times: list[tuple[int, int]] = []
        self._seq = 0
        self._history: list[_Committed] = []
        self._active: dict[int, TxnHandle] = {}
        self._pending: dict[int, list[LogRecord]] = {}
        self._txn_ids = itertools.count(1)
        self.closed = False
        self.recovery = None
        self._file = None
        if binlog_path is not None:
            self._file = BinlogFile(binlog_path, durability)
            self.recovery = self._file.recovery
            if self.recovery.records:
                self._replay(self.recovery.records)

    # -- catalog -----------------------------------------------------------------

    @property
    def dictionary(self) -> DataDictionary:
        cat = self._catalog
        return cat.current if hasattr(cat, "current") else cat

    def _schema(self, entity: str):
        d = self.dictionary
        schema = d.schema(entity)
        if d.binding(entity) is not EngineKind.RELATIONAL:
            raise UnknownEntity(f"{entity} is not bound to the relational tier")
        return schema

    # -- state helpers -----------------------------------------------------------

    @property
    def last_lsn(self) -> int:
        return len(self.log)

    applied_lsn = last_lsn

    def _table(self, entity: str) -> dict:
        t = self.tables.get(entity)
        if t is None:
            t = self.tables[entity] = {}
        return t

    def _check_open(self):
        if self.closed:
            raise EngineClosed(self.node_id)

    def _coerce_row(self, schema, row: dict) -> dict:
        unknown = set(row) - {f.name for f in schema.fields}
        if unknown:
            raise TypeMismatch(f"{schema.entity}: unknown fields {sorted(unknown)}")
        out = {}
        for f in schema.fields:
            v = coerce(f.scalar, row.get(f.name))
            if v is None and not f.nullable:
                raise TypeMismatch(f"{schema.entity}.{f.name} is not nullable")
            out[f.name] = v
        return out

    # -- transactions ------------------------------------------------------------

    def begin(self, tenant_id: str) -> TxnHandle:
        with self._lock:
            self._check_open()
            if self.role != "master":
                raise NotMaster(self.node_id)
            txn = TxnHandle(next(self._txn_ids), tenant_id, self._seq)
            self._active[txn.txn_id] = txn
            return txn

    def _visible(self, txn: TxnHandle, entity: str, key: tuple):
        wk = (entity, (txn.tenant_id, key))
        if wk in txn.writes:
            return txn.writes[wk]
        return self._table(entity).get((txn.tenant_id, key))

    def execute(self, txn: TxnHandle, stmt):
        with self._lock:
            self._check_open()
            if txn.state is not TxnState.ACTIVE:
                raise AlreadyFinished(f"txn {txn.txn_id} is {txn.state.value}")
            schema = self._schema(stmt.entity)
            entity = stmt.entity
            if isinstance(stmt, Insert):
                self._require(schema, CrudOp.CREATE)
                row = self._coerce_row(schema, stmt.row)
                key = row_key(schema, row)
                wk = (entity, (txn.tenant_id, key))
                txn.reads.add(wk)
                if self._visible(txn, entity, key) is not None:
                    raise PrimaryKeyViolation(f"{entity} {key!r}")
                txn.writes[wk] = row
                return 1
            if isinstance(stmt, Update):
                self._require(schema, CrudOp.UPDATE)
                key = pk_key(schema, stmt.pk)
                wk = (entity, (txn.tenant_id, key))
                txn.reads.add(wk)
                old = self._visible(txn, entity, key)
                if old is None:
                    raise RowNotFound(f"{entity} {key!r}")
                changes = {}
                for name, v in stmt.changes.items():
                    f = schema.field(name)
                    if f is None:
                        raise TypeMismatch(f"{entity}: unknown field {name}")
                    v = coerce(f.scalar, v)
                    if v is None and not f.nullable:
                        raise TypeMismatch(f"{entity}.{name} is not nullable")
                    if name in schema.primary_key and v != old[name]:
                        raise TypeMismatch(f"{entity}: primary key is immutable")
                    changes[name] = v
                txn.writes[wk] = {**old, **changes}
                return 1
            if isinstance(stmt, Delete):
                self._require(schema, CrudOp.DELETE)
                key = pk_key(schema, stmt.pk)
                wk = (entity, (txn.tenant_id, key))
                txn.reads.add(wk)
                if self._visible(txn, entity, key) is None:
                    raise RowNotFound(f"{entity} {key!r}")
                txn.writes[wk] = None
                return 1
            if isinstance(stmt, Select):
                self._require(schema, CrudOp.RETRIEVE)
                pred = parse_predicate(stmt.predicate)
                txn.scans.append((entity, pred))
                rows = {k: r for k, r in self._table(entity).items() if k[0] == txn.tenant_id}
                for (e, k), r in txn.writes.items():
                    if e == entity:
                        if r is None:
                            rows.pop(k, None)
                        else:
                            rows[k] = r
                ordered = [dict(rows[k]) for k in sorted(rows)]
                return run_query(ordered, pred, stmt.order_by, stmt.aggregate)
            raise TypeMismatch(f"unknown statement {stmt!r}")

    @staticmethod
    def _require(schema, op: CrudOp):
        if op not in schema.allowed_ops:
            raise OpNotAllowed(f"{op.value} on {schema.entity}")

    def abort(self, txn: TxnHandle) -> None:
        with self._lock:
            if txn.state is not TxnState.ACTIVE:
                raise AlreadyFinished(f"txn {txn.txn_id} is {txn.state.value}")
            txn.state = TxnState.ABORTED
            self._finish(txn)

    def _finish(self, txn: TxnHandle):
        self._active.pop(txn.txn_id, None)
        horizon = min((t.start_seq for t in self._active.values()), default=self._seq)
        if self._history and self._history[0].seq <= horizon:
            self._history = [c for c in self._history if c.seq > horizon]

    def _conflicts(self, txn: TxnHandle) -> bool:
        for c in self._history:
            if c.seq <= txn.start_seq:
                continue
            for wk, (before, after) in c.writes.items():
                if wk in txn.reads or wk in txn.writes:
                    return True
                entity, (tenant, _) = wk
                if tenant != txn.tenant_id:
                    continue
                for scan_entity, pred in txn.scans:
                    if scan_entity == entity and (
                        (before is not None and matches(before, pred))
                        or (after is not None and matches(after, pred))
                    ):
                        return True
        return False

    def commit(self, txn: TxnHandle) -> int:
        with self._lock:
            self._check_open()
            if txn.state is not TxnState.ACTIVE:
                raise AlreadyFinished(f"txn {txn.txn_id} is {txn.state.value}")
            if self.role != "master":
                raise NotMaster(self.node_id)
            if self._conflicts(txn):
                txn.state = TxnState.ABORTED
                self._finish(txn)
                raise Conflict(f"txn {txn.txn_id} lost a serialization race")
            lsn = self.last_lsn
            records = []
            effects = {}
            for wk, after in txn.writes.items():
                entity, (tenant, key) = wk
                before = self._table(entity).get((tenant, key))
                if before is None and after is None:
                    continue
                op = LogOp.INSERT if before is None else (LogOp.DELETE if after is None else LogOp.UPDATE)
                lsn += 1
                records.append(LogRecord(lsn, txn.txn_id, tenant, entity, op, before, after))
                effects[wk] = (before, after)
            lsn += 1
            records.append(LogRecord(lsn, txn.txn_id, txn.tenant_id, "", LogOp.COMMIT))
            if self._file is not None:
                self._file.append(records)
            self.log.extend(records)
            for (entity, k), (_, after) in effects.items():
                table = self._table(entity)
                if after is None:
                    del table[k]
                else:
                    table[k] = after
            self._seq += 1
            if effects:
                self._history.append(_Committed(self._seq, txn.tenant_id, effects))
            self.commit_times.append((lsn, self.clock()))
            txn.state = TxnState.COMMITTED
            self._finish(txn)
            return lsn

    def run(self, tenant_id: str, statements) -> tuple[list, int]:
        """Execute ``statements`` in one transaction; returns (results, commit lsn)."""
        txn = self.begin(tenant_id)
        try:
            results = [self.execute(txn, s) for s in statements]
        except Exception:
            if txn.state is TxnState.ACTIVE:
                self.abort(txn)
            raise
        return results, self.commit(txn)

    # -- reads outside transactions -----------------------------------------------

    def select(self, tenant_id: str | None, entity: str, predicate=(), order_by=None,
               aggregate=None, stale_ok: bool = False) -> list[dict]:
        with self._lock:
            self._check_open()
            if self.role != "master" and not stale_ok:
                raise NotMaster(f"{self.node_id} serves reads only with stale_ok")
            self._require(self._schema(entity), CrudOp.RETRIEVE)
            table = self._table(entity)
            rows = [dict(table[k]) for k in sorted(table) if tenant_id is None or k[0] == tenant_id]
            return run_query(rows, parse_predicate(predicate), order_by, aggregate)

    def get(self, tenant_id: str, entity: str, pk, stale_ok: bool = False) -> dict | None:
        with self._lock:
            self._check_open()
            if self.role != "master" and not stale_ok:
                raise NotMaster(f"{self.node_id} serves reads only with stale_ok")
            schema = self._schema(entity)
            row = self._table(entity).get((tenant_id, pk_key(schema, pk)))
            return dict(row) if row is not None else None

    # -- log access and shipping -----------------------------------------------------

    def read_log(self, from_lsn: int, max_records: int | None = None) -> list[LogRecord]:
        if from_lsn < 1:
            raise ValueError("from_lsn starts at 1")
        with self._lock:
            end = None if max_records is None else from_lsn - 1 + max_records
            return self.log[from_lsn - 1:end]

    def apply_replica(self, records) -> int:
        with self._lock:
            self._check_open()
            fresh = [r for r in records if r.lsn > self.last_lsn]
            expect = self.last_lsn + 1
            for r in fresh:
                if r.lsn != expect:
                    raise LsnGap(f"{self.node_id}: expected lsn {expect}, got {r.lsn}")
                expect += 1
            if not fresh:
                return self.last_lsn
            if self._file is not None:
                self._file.append(fresh)
            self._replay(fresh)
            return self.last_lsn

    def _replay(self, records) -> None:
        for r in records:
            self.log.append(r)
            if r.is_data:
                self._pending.setdefault(r.txn_id, []).append(r)
            elif r.op is LogOp.COMMIT:
                for d in self._pending.pop(r.txn_id, ()):
                    self._apply_data(d)
                self.commit_times.append((r.lsn, self.clock()))
            else:
                self._pending.pop(r.txn_id, None)
        if records:
            last_txn = max(r.txn_id for r in records)
            current = next(self._txn_ids)
            self._txn_ids = itertools.count(max(current, last_txn + 1))

    def _apply_data(self, r: LogRecord) -> None:
        schema = self.dictionary.schema(r.entity)
        table = self._table(r.entity)
        if r.op is LogOp.DELETE:
            table.pop((r.tenant_id, row_key(schema, r.before)), None)
        else:
            table[(r.tenant_id, row_key(schema, r.after))] = dict(r.after)

    def promote(self) -> None:
        """Slave becomes master; transactions cut off mid-shipment are aborted."""
        with self._lock:
            self.role = "master"
            aborts = []
            for txn_id, recs in sorted(self._pending.items()):
                aborts.append(LogRecord(self.last_lsn + len(aborts) + 1, txn_id, recs[0].tenant_id,
                                        "", LogOp.ABORT))
            self._pending.clear()
            if aborts:
                if self._file is not None:
                    self._file.append(aborts)
                self.log.extend(aborts)

    def demote(self) -> None:
        with self._lock:
            self.role = "slave"
            for txn in list(self._active.values()):
                txn.state = TxnState.ABORTED
            self._active.clear()

    # -- inspection -----------------------------------------------------------------

    def snapshot(self) -> dict[str, dict[tuple, dict]]:
        with self._lock:
            return {e: {k: dict(r) for k, r in t.items()} for e, t in self.tables.items() if t}

    def snapshot_bytes(self) -> bytes:
        with self._lock:
            out = bytearray()
            for entity in sorted(self.tables):
                table = self.tables[entity]
                for k in sorted(table):
                    out += entity.encode() + b"\x00" + k[0].encode() + b"\x00"
                    out += encode_row(table[k])
            return bytes(out)

    def lag_millis(self, applied_lsn: int, now: int) -> int:
        for lsn, at in self.commit_times:
            if lsn > applied_lsn:
                return max(0, now - at)
        return 0

    def close(self) -> None:
        with self._lock:
            self.closed = True
            if self._file is not None:
                self._file.close()
