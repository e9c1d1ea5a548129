"""Log-based change capture from relational shards into NoSQL replica sets.

Three stages: :func:`map_schema` turns a table schema into a collection
mapping, :func:`transform` turns committed log records into NoSQL ops, and
:class:`ReplicationPipeline` tails a shard's log from its checkpoint and
applies the ops to the shard's replica set.

Delivery is at-least-once. Every op carries ``(source_lsn, seq)`` and the
stores drop anything at or below their watermark, so re-delivery is harmless.
The checkpoint is persisted only after the apply succeeded.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import Callable, Mapping

from .data_model import DataDictionary, EngineKind
from .errors import (
    NodeUnavailable,
    NoPrimary,
    NotStructured,
    PrimaryUnavailable,
    ShardUnreachable,
    UnmappedEntity,
)
from .nosql.engines import CreateCollection, DeleteDoc, DeleteEdge, MarkApplied, ResetCollection, UpsertDoc, UpsertEdge
from .relational.binlog import LogOp, LogRecord

DEFAULT_BATCH = 64


@dataclass(frozen=True)
class ReferenceField:
    relationship: str
    field: str
    key_fields: tuple[str, ...]


@dataclass(frozen=True)
class GraphEdge:
    label: str
    graph: str
    key_fields: tuple[str, ...]


@dataclass(frozen=True)
class CollectionMapping:
    entity: str
    collection: str
    pk_fields: tuple[str, ...]
    references: tuple[ReferenceField, ...] = ()
    edges: tuple[GraphEdge, ...] = ()

    def doc_id(self, row: dict) -> str:
        return join_key(row, self.pk_fields)

    def document(self, row: dict) -> dict:
        doc = dict(row)
        for ref in self.references:
            doc[ref.field] = join_key(row, ref.key_fields)
        return doc

    def edge_ends(self, edge: GraphEdge, row: dict) -> tuple[str, str]:
        return f"{self.entity}:{self.doc_id(row)}", f"{edge.graph}:{join_key(row, edge.key_fields)}"


def join_key(row: dict, fields) -> str:
    return "|".join(str(row[f]) for f in fields)


def map_schema(schema, dictionary: DataDictionary) -> CollectionMapping:
    if not schema.structured:
        raise NotStructured(schema.entity)
    refs, edges = [], []
    for rel in schema.relationships:
        if dictionary.engine_binding.get(rel.to_entity) is EngineKind.GRAPH:
            edges.append(GraphEdge(rel.name, rel.to_entity, rel.key_fields))
        else:
            refs.append(ReferenceField(rel.name, f"{rel.name}_id", rel.key_fields))
    return CollectionMapping(schema.entity, schema.entity, schema.primary_key, tuple(refs), tuple(edges))


def mappings_for(dictionary: DataDictionary) -> dict[str, CollectionMapping]:
    return {
        name: map_schema(s, dictionary)
        for name, s in dictionary.entities.items()
        if dictionary.engine_binding[name] is EngineKind.RELATIONAL
    }


def transform(record: LogRecord, mapping) -> tuple:
    """NoSQL ops for one committed data record; ``()`` means skip.

    ``mapping`` is a :class:`CollectionMapping` or an entity-keyed mapping of
    them. Callers hand over only records of committed transactions.
    """
    if not record.is_data:
        return ()
    if not isinstance(mapping, CollectionMapping):
        try:
            mapping = mapping[record.entity]
        except KeyError:
            raise UnmappedEntity(record.entity) from None
    elif mapping.entity != record.entity:
        raise UnmappedEntity(record.entity)
    lsn, tenant = record.lsn, record.tenant_id
    ops = []
    seq = 0
    if record.op is LogOp.DELETE:
        row = record.before
        ops.append(DeleteDoc(mapping.collection, mapping.doc_id(row), lsn, seq, tenant))
        for edge in mapping.edges:
            seq += 1
            src, dst = mapping.edge_ends(edge, row)
            ops.append(DeleteEdge(edge.graph, src, dst, edge.label, lsn, seq, tenant))
        return tuple(ops)
    row = record.after
    ops.append(UpsertDoc(mapping.collection, mapping.doc_id(row), mapping.document(row), lsn, seq, tenant))
    for edge in mapping.edges:
        src, dst = mapping.edge_ends(edge, row)
        if record.op is LogOp.UPDATE:
            old_src, old_dst = mapping.edge_ends(edge, record.before)
            if (old_src, old_dst) == (src, dst):
                continue
            seq += 1
            ops.append(DeleteEdge(edge.graph, old_src, old_dst, edge.label, lsn, seq, tenant))
        seq += 1
        ops.append(UpsertEdge(edge.graph, src, dst, edge.label, {}, lsn, seq, tenant))
    return tuple(ops)


def expected_documents(tables: Mapping[str, Mapping[tuple, dict]], mapping: CollectionMapping) -> dict:
    """(tenant, doc_id) -> document for a relational snapshot (the
    convergence oracle)."""
    out = {}
    for (tenant, _), row in tables.get(mapping.entity, {}).items():
        out[(tenant, mapping.doc_id(row))] = mapping.document(row)
    return out


def expected_edges(tables, mapping: CollectionMapping) -> dict:
    """(graph, tenant) -> sorted edge triples implied by a relational snapshot."""
    out: dict = {}
    for edge in mapping.edges:
        for (tenant, _), row in tables.get(mapping.entity, {}).items():
            src, dst = mapping.edge_ends(edge, row)
            out.setdefault((edge.graph, tenant), set()).add((src, dst, edge.label))
    return {k: sorted(v) for k, v in out.items()}


# -- checkpoints ------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    shard_id: str
    last_applied_lsn: int = 0
    updated_at: int = 0


class MemoryCheckpointStore:
    def __init__(self):
        self._data: dict[str, Checkpoint] = {}

    def load(self, shard_id: str) -> Checkpoint:
        return self._data.get(shard_id, Checkpoint(shard_id))

    def save(self, cp: Checkpoint, force: bool = False) -> None:
        prev = self._data.get(cp.shard_id)
        if not force and prev is not None and cp.last_applied_lsn < prev.last_applied_lsn:
            raise ValueError("checkpoint may not move backwards")
        self._data[cp.shard_id] = cp


class FileCheckpointStore:
    """One file per shard holding ``shard_id<TAB>last_applied_lsn``;
    replaced atomically by rename."""

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def _path(self, shard_id: str) -> str:
        return os.path.join(self.directory, f"{shard_id}.ckpt")

    def load(self, shard_id: str) -> Checkpoint:
        try:
            with open(self._path(shard_id), encoding="utf-8") as fh:
                sid, lsn = fh.read().strip().split("\t")
        except FileNotFoundError:
            return Checkpoint(shard_id)
        return Checkpoint(sid, int(lsn))

    def save(self, cp: Checkpoint, force: bool = False) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{cp.shard_id}.")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(f"{cp.shard_id}\t{cp.last_applied_lsn}\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._path(cp.shard_id))


@dataclass(frozen=True)
class LagMetric:
    shard_id: str
    master_lsn: int
    applied_lsn: int
    lag_records: int
    lag_millis: int = 0


class SimulatedCrash(Exception):
    """Raised by fault hooks to abandon a pipeline iteration."""


class ReplicationPipeline:
    """One worker per shard. ``source`` and ``target`` are zero-argument
    callables returning the current master engine and replica set, so
    failover on either side is picked up on the next iteration."""

    def __init__(self, shard_id: str, source: Callable, target: Callable, dictionary: Callable,
                 checkpoints=None, batch: int = DEFAULT_BATCH, clock: Callable[[], int] | None = None,
                 fault: Callable[[str], None] | None = None):
        self.shard_id = shard_id
        self._source = source
        self._target = target
        self._dictionary = dictionary
        self.checkpoints = checkpoints if checkpoints is not None else MemoryCheckpointStore()
        self.batch = batch
        self.clock = clock or (lambda: 0)
        self.fault = fault or (lambda point: None)
        self.cursor: int | None = None
        self.buffers: dict[int, list[LogRecord]] = {}
        self._epoch_seen: int | None = None
        self._mappings: dict[str, CollectionMapping] = {}
        self._dict_version = -1
        self.paused = False
        self.iterations = 0

    @property
    def checkpoint(self) -> Checkpoint:
        return self.checkpoints.load(self.shard_id)

    def _resolve(self):
        try:
            source = self._source()
        except NodeUnavailable as exc:
            raise ShardUnreachable(self.shard_id) from exc
        if source is None or getattr(source, "closed", False):
            raise ShardUnreachable(self.shard_id)
        rs = self._target()
        if rs is None or rs.primary is None or not rs.nodes[rs.primary].up:
            raise PrimaryUnavailable(self.shard_id)
        return source, rs

    def _apply(self, rs, op) -> None:
        try:
            rs.apply(op, epoch=rs.epoch)
        except (NodeUnavailable, NoPrimary) as exc:
            raise PrimaryUnavailable(self.shard_id) from exc

    def _refresh_mappings(self, rs) -> None:
        d = self._dictionary()
        if d.version != self._dict_version:
            new = mappings_for(d)
            for name, m in sorted(new.items()):
                if name not in self._mappings:
                    self._apply(rs, CreateCollection(m.collection))
            self._mappings = new
            self._dict_version = d.version

    def run_once(self) -> Checkpoint:
        """One iteration: read a batch, apply committed transactions,
        persist the checkpoint. Volatile progress is discarded on error."""
        if self.paused:
            return self.checkpoint
        source, rs = self._resolve()
        primary = rs.nodes[rs.primary]
        cp = self.checkpoint
        if self.cursor is None or self._epoch_seen != rs.epoch:
            if self._epoch_seen is not None and self._epoch_seen != rs.epoch:
                self._mappings, self._dict_version = {}, -1
            mark = primary.stores.marks.get(self.shard_id, 0)
            self.cursor = min(cp.last_applied_lsn if self.cursor is None else self.cursor, mark)
            self.buffers = {}
            self._epoch_seen = rs.epoch
        self._refresh_mappings(rs)
        self.iterations += 1
        records = source.read_log(self.cursor + 1, self.batch)
        self.fault("after_read")
        if not records:
            return cp
        buffers = {k: list(v) for k, v in self.buffers.items()}
        for rec in records:
            if rec.is_data:
                buffers.setdefault(rec.txn_id, []).append(rec)
            elif rec.op is LogOp.COMMIT:
                for data in buffers.pop(rec.txn_id, ()):
                    for op in transform(data, self._mappings):
                        self._apply(rs, op)
                        self.fault("mid_apply")
            else:
                buffers.pop(rec.txn_id, None)
        cursor = records[-1].lsn
        pending = [recs[0].lsn for recs in buffers.values() if recs]
        safe = min(pending) - 1 if pending else cursor
        if safe > primary.stores.marks.get(self.shard_id, 0):
            self._apply(rs, MarkApplied(self.shard_id, safe))
        self.cursor, self.buffers = cursor, buffers
        self.fault("after_apply")
        if safe > cp.last_applied_lsn:
            cp = Checkpoint(self.shard_id, safe, self.clock())
            self.checkpoints.save(cp)
        self.fault("after_persist")
        return cp

    def drain(self, max_iterations: int = 1_000_000) -> Checkpoint:
        """Iterate until the checkpoint reaches the master's tail."""
        cp = self.checkpoint
        for _ in range(max_iterations):
            source, rs = self._resolve()
            tail = source.last_lsn
            # a primary change rewinds the cursor, so a caught-up checkpoint
            # alone does not mean the new primary has everything
            if (cp.last_applied_lsn >= tail and self.cursor is not None and self.cursor >= tail
                    and self._epoch_seen == rs.epoch):
                return cp
            before = (self.cursor, cp.last_applied_lsn)
            cp = self.run_once()
            if (self.cursor, cp.last_applied_lsn) == before and self.paused:
                return cp
        return cp

    def restart(self) -> None:
        """Forget volatile progress, as after a process crash."""
        self.cursor = None
        self.buffers = {}
        self._epoch_seen = None
        self._mappings, self._dict_version = {}, -1

    def measure_lag(self, now: int | None = None) -> LagMetric:
        try:
            source = self._source()
        except NodeUnavailable as exc:
            raise ShardUnreachable(self.shard_id) from exc
        if source is None or getattr(source, "closed", False):
            raise ShardUnreachable(self.shard_id)
        master = source.last_lsn
        applied = min(self.checkpoint.last_applied_lsn, master)
        millis = source.lag_millis(applied, self.clock() if now is None else now)
        return LagMetric(self.shard_id, master, applied, master - applied, millis)

    def resync(self) -> Checkpoint:
        """Seed collections from a table snapshot at lsn L, then stream from L+1."""
        source, rs = self._resolve()
        with source._lock:
            tables = source.snapshot()
            lsn = source.last_lsn
        mappings = mappings_for(self._dictionary())
        for name, m in sorted(mappings.items()):
            self._apply(rs, ResetCollection(m.collection))
            seq = 0
            for (tenant, _), row in sorted(tables.get(name, {}).items()):
                self._apply(rs, UpsertDoc(m.collection, m.doc_id(row), m.document(row), lsn, seq, tenant))
                seq += 1
                for edge in m.edges:
                    src, dst = m.edge_ends(edge, row)
                    self._apply(rs, UpsertEdge(edge.graph, src, dst, edge.label, {}, lsn, seq, tenant))
                    seq += 1
        self._apply(rs, MarkApplied(self.shard_id, lsn))
        self.cursor, self.buffers = lsn, {}
        self._epoch_seen = rs.epoch
        self._mappings, self._dict_version = mappings, self._dictionary().version
        cp = Checkpoint(self.shard_id, lsn, self.clock())
        self.checkpoints.save(cp, force=True)
        return cp
