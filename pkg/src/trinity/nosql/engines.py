"""The four embedded stores and the operations that mutate them.

Stores are plain in-memory structures; :class:`NodeStores` keeps one instance
per (namespace, tenant) and applies :data:`NoSqlOp` values to them.
"""

from __future__ import annotations

import bisect
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from ..errors import InvalidBox, TypeMismatch, UnknownCollection, UnknownNode
from ..predicate import parse_predicate, run_query
from ..values import to_jsonable

# -- operations -------------------------------------------------------------------


@dataclass(frozen=True)
class UpsertDoc:
    collection: str
    doc_id: str
    document: dict
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class DeleteDoc:
    collection: str
    doc_id: str
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class UpsertNode:
    graph: str
    node_id: str
    properties: dict = field(default_factory=dict)
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class DeleteNode:
    graph: str
    node_id: str
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class UpsertEdge:
    graph: str
    src: str
    dst: str
    label: str
    properties: dict = field(default_factory=dict)
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class DeleteEdge:
    graph: str
    src: str
    dst: str
    label: str
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class KvPut:
    namespace: str
    key: str
    value: Any
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class KvDelete:
    namespace: str
    key: str
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class StPut:
    layer: str
    point_id: str
    x: float
    y: float
    t: int
    payload: dict = field(default_factory=dict)
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class StDelete:
    layer: str
    point_id: str
    source_lsn: int | None = None
    seq: int = 0
    tenant: str = ""


@dataclass(frozen=True)
class CreateCollection:
    collection: str
    source_lsn: int | None = None
    seq: int = 0


@dataclass(frozen=True)
class ResetCollection:
    """Drop every document of a collection (snapshot resync)."""

    collection: str
    source_lsn: int | None = None
    seq: int = 0


@dataclass(frozen=True)
class MarkApplied:
    """Records that a source shard's log has been applied through ``lsn``."""

    shard: str
    lsn: int
    source_lsn: int | None = None
    seq: int = 0


NoSqlOp = (UpsertDoc | DeleteDoc | UpsertNode | DeleteNode | UpsertEdge | DeleteEdge
           | KvPut | KvDelete | StPut | StDelete | CreateCollection | ResetCollection | MarkApplied)


def op_domain(op) -> tuple:
    """Idempotence domain; source lsns are monotone within one domain."""
    if isinstance(op, (UpsertDoc, DeleteDoc, CreateCollection, ResetCollection)):
        return ("doc", op.collection)
    if isinstance(op, (UpsertNode, DeleteNode, UpsertEdge, DeleteEdge)):
        return ("graph", op.graph)
    if isinstance(op, (KvPut, KvDelete)):
        return ("kv", op.namespace)
    if isinstance(op, (StPut, StDelete)):
        return ("st", op.layer)
    return ("mark", op.shard)


def op_entity(op) -> str:
    return op_domain(op)[1]


# -- stores -----------------------------------------------------------------------


@dataclass
class Document:
    doc_id: str
    fields: dict
    source_lsn: int | None = None

    def view(self) -> dict:
        return {"_id": self.doc_id, **self.fields}


class DocumentCollection:
    def __init__(self):
        self.docs: dict[str, Document] = {}

    def upsert(self, doc_id: str, fields: dict, source_lsn=None) -> None:
        self.docs[doc_id] = Document(doc_id, dict(fields), source_lsn)

    def delete(self, doc_id: str) -> None:
        self.docs.pop(doc_id, None)

    def query(self, predicate=(), order_by=None, aggregate=None) -> list[dict]:
        """Documents as ``{"_id": doc_id, **fields}``, ascending by ``_id``."""
        rows = [self.docs[k].view() for k in sorted(self.docs)]
        return run_query(rows, parse_predicate(predicate), order_by, aggregate)

    def __len__(self):
        return len(self.docs)


class KeyValueStore:
    def __init__(self):
        self._map: dict[str, Any] = {}
        self._keys: list[str] = []

    def get(self, key: str, default=None):
        return self._map.get(key, default)

    def put(self, key: str, value) -> None:
        if not key:
            raise TypeMismatch("key must be nonempty")
        if key not in self._map:
            bisect.insort(self._keys, key)
        self._map[key] = value

    def delete(self, key: str) -> bool:
        if key not in self._map:
            return False
        del self._map[key]
        del self._keys[bisect.bisect_left(self._keys, key)]
        return True

    def scan_prefix(self, prefix: str) -> list[tuple[str, Any]]:
        i = bisect.bisect_left(self._keys, prefix)
        out = []
        while i < len(self._keys) and self._keys[i].startswith(prefix):
            k = self._keys[i]
            out.append((k, self._map[k]))
            i += 1
        return out

    def __len__(self):
        return len(self._map)


class GraphStore:
    """Directed labelled multigraph; at most one edge per (src, dst, label)."""

    def __init__(self):
        self.nodes: dict[str, dict] = {}
        self.out: dict[str, dict[tuple[str, str], dict]] = {}
        self.inc: dict[str, set[tuple[str, str]]] = {}

    def upsert_node(self, node_id: str, properties=None) -> None:
        if node_id not in self.nodes:
            self.out[node_id] = {}
            self.inc[node_id] = set()
        self.nodes[node_id] = dict(properties or {})

    def _ensure(self, node_id: str) -> None:
        if node_id not in self.nodes:
            self.upsert_node(node_id)

    def delete_node(self, node_id: str) -> None:
        if node_id not in self.nodes:
            return
        for dst, label in list(self.out[node_id]):
            self.inc[dst].discard((node_id, label))
        for src, label in list(self.inc[node_id]):
            self.out[src].pop((node_id, label), None)
        del self.nodes[node_id], self.out[node_id], self.inc[node_id]

    def upsert_edge(self, src: str, dst: str, label: str, properties=None) -> None:
        self._ensure(src)
        self._ensure(dst)
        self.out[src][(dst, label)] = dict(properties or {})
        self.inc[dst].add((src, label))

    def delete_edge(self, src: str, dst: str, label: str) -> None:
        if src in self.out and self.out[src].pop((dst, label), None) is not None:
            self.inc[dst].discard((src, label))

    def edges(self) -> list[tuple[str, str, str]]:
        return sorted((s, d, l) for s, es in self.out.items() for (d, l) in es)

    def neighbors(self, node_id: str, max_depth: int) -> set[tuple[str, int]]:
        if max_depth < 1:
            raise TypeMismatch("max_depth must be at least 1")
        if node_id not in self.nodes:
            raise UnknownNode(node_id)
        depth = {node_id: 0}
        queue = deque([node_id])
        while queue:
            n = queue.popleft()
            d = depth[n]
            if d == max_depth:
                continue
            for dst, _ in self.out[n]:
                if dst not in depth:
                    depth[dst] = d + 1
                    queue.append(dst)
        return {(n, d) for n, d in depth.items() if n != node_id}


@dataclass(frozen=True)
class SpatioTemporalPoint:
    point_id: str
    x: float
    y: float
    t: int
    payload: dict = field(default_factory=dict, compare=False, hash=False)


class SpatioTemporalStore:
    """Points kept sorted by time; space is filtered linearly."""

    def __init__(self):
        self.points: dict[str, SpatioTemporalPoint] = {}
        self._by_time: list[tuple[int, str]] = []

    def put(self, point_id: str, x: float, y: float, t: int, payload=None) -> None:
        if not (-180.0 <= x <= 180.0 and -90.0 <= y <= 90.0):
            raise TypeMismatch(f"point {point_id} outside lon/lat range")
        self.delete(point_id)
        self.points[point_id] = SpatioTemporalPoint(point_id, float(x), float(y), int(t), dict(payload or {}))
        bisect.insort(self._by_time, (int(t), point_id))

    def delete(self, point_id: str) -> None:
        p = self.points.pop(point_id, None)
        if p is not None:
            del self._by_time[bisect.bisect_left(self._by_time, (p.t, point_id))]

    def range(self, box, interval) -> list[SpatioTemporalPoint]:
        x1, y1, x2, y2 = box
        t1, t2 = interval
        if x1 > x2 or y1 > y2 or t1 > t2:
            raise InvalidBox(f"box={box} interval={interval}")
        lo = bisect.bisect_left(self._by_time, (t1, ""))
        out = []
        for t, pid in self._by_time[lo:]:
            if t > t2:
                break
            p = self.points[pid]
            if x1 <= p.x <= x2 and y1 <= p.y <= y2:
                out.append(p)
        return out

    def __len__(self):
        return len(self.points)


# -- per-node store set -------------------------------------------------------------


class NodeStores:
    """All stores held by one NoSQL node plus its idempotence watermarks."""

    def __init__(self):
        self.collections: dict[str, dict[str, DocumentCollection]] = {}
        self.kv: dict[tuple[str, str], KeyValueStore] = {}
        self.graphs: dict[tuple[str, str], GraphStore] = {}
        self.spatial: dict[tuple[str, str], SpatioTemporalStore] = {}
        self.hwm: dict[tuple, tuple[int, int]] = {}
        self.marks: dict[str, int] = {}

    def is_duplicate(self, op) -> bool:
        if op.source_lsn is None:
            return False
        mark = self.hwm.get(op_domain(op))
        return mark is not None and (op.source_lsn, op.seq) <= mark

    def apply(self, op) -> None:
        if op.source_lsn is not None:
            self.hwm[op_domain(op)] = (op.source_lsn, op.seq)
        if isinstance(op, UpsertDoc):
            self.collection(op.collection, op.tenant, create=True).upsert(op.doc_id, op.document, op.source_lsn)
        elif isinstance(op, DeleteDoc):
            self.collection(op.collection, op.tenant, create=True).delete(op.doc_id)
        elif isinstance(op, CreateCollection):
            self.collections.setdefault(op.collection, {})
        elif isinstance(op, ResetCollection):
            self.collections[op.collection] = {}
            self.hwm.pop(("doc", op.collection), None)
            if op.source_lsn is not None:
                self.hwm[("doc", op.collection)] = (op.source_lsn, op.seq)
        elif isinstance(op, UpsertNode):
            self.graph(op.graph, op.tenant).upsert_node(op.node_id, op.properties)
        elif isinstance(op, DeleteNode):
            self.graph(op.graph, op.tenant).delete_node(op.node_id)
        elif isinstance(op, UpsertEdge):
            self.graph(op.graph, op.tenant).upsert_edge(op.src, op.dst, op.label, op.properties)
        elif isinstance(op, DeleteEdge):
            self.graph(op.graph, op.tenant).delete_edge(op.src, op.dst, op.label)
        elif isinstance(op, KvPut):
            self.kv_store(op.namespace, op.tenant).put(op.key, op.value)
        elif isinstance(op, KvDelete):
            self.kv_store(op.namespace, op.tenant).delete(op.key)
        elif isinstance(op, StPut):
            self.st_store(op.layer, op.tenant).put(op.point_id, op.x, op.y, op.t, op.payload)
        elif isinstance(op, StDelete):
            self.st_store(op.layer, op.tenant).delete(op.point_id)
        elif isinstance(op, MarkApplied):
            self.marks[op.shard] = max(self.marks.get(op.shard, 0), op.lsn)
        else:
            raise TypeMismatch(f"unknown NoSQL op {op!r}")

    def collection(self, name: str, tenant: str, create: bool = False) -> DocumentCollection:
        tenants = self.collections.get(name)
        if tenants is None:
            if not create:
                raise UnknownCollection(name)
            tenants = self.collections[name] = {}
        coll = tenants.get(tenant)
        if coll is None:
            coll = tenants[tenant] = DocumentCollection()
        return coll

    def documents(self, name: str, tenant: str | None = None) -> list[tuple[str, dict]]:
        """(tenant, document view) pairs, sorted; ``None`` means every tenant."""
        if name not in self.collections:
            raise UnknownCollection(name)
        out = []
        for t in sorted(self.collections[name]):
            if tenant is None or t == tenant:
                out.extend((t, d) for d in self.collections[name][t].query())
        return out

    def kv_store(self, namespace: str, tenant: str) -> KeyValueStore:
        return self.kv.setdefault((namespace, tenant), KeyValueStore())

    def graph(self, name: str, tenant: str) -> GraphStore:
        return self.graphs.setdefault((name, tenant), GraphStore())

    def st_store(self, layer: str, tenant: str) -> SpatioTemporalStore:
        return self.spatial.setdefault((layer, tenant), SpatioTemporalStore())

    def canonical(self) -> dict:
        docs = {
            name: {t: [d.view() for _, d in sorted(c.docs.items())] for t, c in sorted(tenants.items()) if c.docs}
            for name, tenants in sorted(self.collections.items())
        }
        return to_jsonable({
            "documents": docs,
            "kv": {f"{n}/{t}": s.scan_prefix("") for (n, t), s in sorted(self.kv.items()) if len(s)},
            "graphs": {
                f"{n}/{t}": {"nodes": sorted(g.nodes), "edges": g.edges()}
                for (n, t), g in sorted(self.graphs.items()) if g.nodes
            },
            "spatial": {
                f"{n}/{t}": [[p.point_id, p.x, p.y, p.t] for p in sorted(s.points.values(), key=lambda p: p.point_id)]
                for (n, t), s in sorted(self.spatial.items()) if len(s)
            },
            "marks": dict(sorted(self.marks.items())),
        })

    def digest(self) -> str:
        raw = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(raw.encode()).hexdigest()[:16]
