"""In-process assembly of every tier: shards, replica sets, CDC workers,
router and cache. The network service and the benchmarks run on this."""

from __future__ import annotations

import json
import os
import threading
from typing import Callable

from .autoscaler import Autoscaler, Metrics, ScalingAction, ScalingPolicy
from .cache import QueryCache
from .data_model import Catalog, EngineKind, EntitySchema, TenantConfig, load_schema_file, schema_to_doc
from .errors import NodeUnavailable, TypeMismatch, UnknownShard
from .nosql.engines import (
    DeleteDoc,
    DeleteEdge,
    DeleteNode,
    KvDelete,
    KvPut,
    MarkApplied,
    CreateCollection,
    NodeStores,
    StDelete,
    StPut,
    UpsertDoc,
    UpsertEdge,
    UpsertNode,
    op_entity,
)
from .nosql.replica_set import ReplicaSet
from .predicate import parse_predicate, run_query
from .relational.engine import Delete, Insert, RelationalEngine, Update
from .replication import FileCheckpointStore, MemoryCheckpointStore, ReplicationPipeline
from .router import ClusterView, Operation, Request, Router, Target
from .shard_manager import ShardMembers, add_shard, default_members, make_shard_map, replace_members, routing_key


def _gather_args(req: Request):
    g = req.gather
    if g is None:
        return None, None
    if g.mode == "OrderedMergeBy":
        return g.field, None
    if g.mode == "Aggregate":
        return None, (g.fn, g.field)
    return None, None


def nosql_write_op(req: Request, engine: EngineKind, tenant: str):
    """Translate a direct unstructured write into its store op."""
    row = dict(req.row or {})
    delete = req.operation is Operation.DELETE
    if engine is EngineKind.DOCUMENT:
        if req.key is None:
            raise TypeMismatch("document writes need a key")
        if delete:
            return DeleteDoc(req.entity, req.key, tenant=tenant)
        return UpsertDoc(req.entity, req.key, row, tenant=tenant)
    if engine is EngineKind.KEY_VALUE:
        if not req.key:
            raise TypeMismatch("key must be nonempty")
        if delete:
            return KvDelete(req.entity, req.key, tenant=tenant)
        return KvPut(req.entity, req.key, row.get("value"), tenant=tenant)
    if engine is EngineKind.GRAPH:
        if "src" in row:
            if delete:
                return DeleteEdge(req.entity, row["src"], row["dst"], row.get("label", ""), tenant=tenant)
            return UpsertEdge(req.entity, row["src"], row["dst"], row.get("label", ""),
                              dict(row.get("properties") or {}), tenant=tenant)
        node = row.get("node", req.key)
        if node is None:
            raise TypeMismatch("graph writes need a node or an edge")
        if delete:
            return DeleteNode(req.entity, node, tenant=tenant)
        return UpsertNode(req.entity, node, dict(row.get("properties") or {}), tenant=tenant)
    if engine is EngineKind.SPATIAL_TEMPORAL:
        if req.key is None:
            raise TypeMismatch("spatial writes need a point id")
        if delete:
            return StDelete(req.entity, req.key, tenant=tenant)
        try:
            return StPut(req.entity, req.key, float(row["x"]), float(row["y"]), int(row["t"]),
                         dict(row.get("payload") or {}), tenant=tenant)
        except (KeyError, TypeError, ValueError) as exc:
            raise TypeMismatch(f"bad point {row!r}") from exc
    raise TypeMismatch(f"no direct writes for {engine.value}")


def nosql_read(stores: NodeStores, req: Request, engine: EngineKind, tenant: str) -> list:
    order_by, agg = _gather_args(req)
    row = dict(req.row or {})
    if engine in (EngineKind.RELATIONAL, EngineKind.DOCUMENT):
        docs = [d for _, d in stores.documents(req.entity, tenant)] if req.entity in stores.collections else []
        pred = req.predicate
        if req.key is not None:
            pred = pred + parse_predicate({"_id": req.key})
        return run_query(docs, pred, order_by, agg)
    if engine is EngineKind.KEY_VALUE:
        kv = stores.kv_store(req.entity, tenant)
        if req.key is not None:
            v = kv.get(req.key)
            rows = [] if v is None else [{"key": req.key, "value": v}]
        else:
            rows = [{"key": k, "value": v} for k, v in kv.scan_prefix(row.get("prefix", ""))]
        return run_query(rows, req.predicate, order_by, agg)
    if engine is EngineKind.GRAPH:
        g = stores.graph(req.entity, tenant)
        hits = g.neighbors(row.get("start", req.key), int(row.get("depth", 1)))
        rows = [{"node": n, "depth": d} for n, d in sorted(hits)]
        return run_query(rows, req.predicate, order_by, agg)
    if engine is EngineKind.SPATIAL_TEMPORAL:
        st = stores.st_store(req.entity, tenant)
        pts = st.range(tuple(row["box"]), tuple(row["interval"]))
        rows = [{"id": p.point_id, "x": p.x, "y": p.y, "t": p.t, "payload": p.payload} for p in pts]
        return run_query(rows, req.predicate, order_by, agg)
    raise TypeMismatch(f"no reads for {engine.value}")


class PremiseStore:
    """Stand-in for a tenant's own premises: one engine plus one store set."""

    def __init__(self, endpoint: str, catalog: Catalog):
        self.endpoint = endpoint
        self.engine = RelationalEngine(f"premise:{endpoint}", catalog)
        self.stores = NodeStores()

    def execute(self, req: Request, engine_kind: EngineKind) -> list:
        if engine_kind is EngineKind.RELATIONAL:
            return execute_relational(self.engine, req, False)
        if req.operation in (Operation.RETRIEVE, Operation.QUERY):
            return nosql_read(self.stores, req, engine_kind, req.tenant_id)
        self.stores.apply(nosql_write_op(req, engine_kind, req.tenant_id))
        return [{"affected": 1}]


def execute_relational(engine: RelationalEngine, req: Request, stale_ok: bool) -> list:
    t, e = req.tenant_id, req.entity
    op = req.operation
    if op is Operation.CREATE:
        _, lsn = engine.run(t, [Insert(e, dict(req.row or {}))])
        return [{"affected": 1, "lsn": lsn}]
    if op is Operation.UPDATE:
        _, lsn = engine.run(t, [Update(e, req.pk, dict(req.changes or {}))])
        return [{"affected": 1, "lsn": lsn}]
    if op is Operation.DELETE:
        _, lsn = engine.run(t, [Delete(e, req.pk)])
        return [{"affected": 1, "lsn": lsn}]
    if req.pk is not None:
        row = engine.get(t, e, req.pk, stale_ok=stale_ok)
        return [] if row is None else [row]
    order_by, agg = _gather_args(req)
    return engine.select(t, e, req.predicate, order_by, agg, stale_ok=stale_ok)


class Cluster:
    def __init__(self, shards: int = 1, slaves: int = 1, members: int = 3,
                 data_dir: str | None = None, durability: str = "relaxed",
                 batch: int = 64, cache_capacity: int = 1024,
                 policy: ScalingPolicy | None = None, timeout: int = 500,
                 clock: Callable[[], int] | None = None):
        self.clock = clock or (lambda: 0)
        self.data_dir = data_dir
        self.durability = durability
        self.batch = batch
        self.members_per_set = members
        self.timeout = timeout
        self.lock = threading.RLock()
        self.catalog = Catalog()
        self.tenants: dict[str, TenantConfig] = {}
        self._schema_log = None
        if data_dir is not None:
            os.makedirs(data_dir, exist_ok=True)
            self._schema_log = os.path.join(data_dir, "schema.ndjson")
            if os.path.exists(self._schema_log):
                with open(self._schema_log, encoding="utf-8") as fh:
                    for schema in load_schema_file(fh.read()):
                        self.catalog.apply(schema)
            self.checkpoints = FileCheckpointStore(os.path.join(data_dir, "cdc"))
        else:
            self.checkpoints = MemoryCheckpointStore()
        self.shard_map = make_shard_map([f"s{i}" for i in range(shards)], slaves)
        self.engines: dict[str, RelationalEngine] = {}
        self.relational_up: dict[str, bool] = {}
        self.replica_sets: dict[str, ReplicaSet] = {}
        self.pipelines: dict[str, ReplicationPipeline] = {}
        self.premises: dict[str, PremiseStore] = {}
        self.cache = QueryCache(cache_capacity)
        self.router = Router(self, self.cache, self.clock)
        self.autoscaler = Autoscaler(policy)
        self.request_counts: dict[str, int] = {}
        for s in self.shard_map.shards:
            self._build_shard(s)

    # -- construction ---------------------------------------------------------------

    def _engine(self, node: str, role: str) -> RelationalEngine:
        path = None
        if self.data_dir is not None:
            path = os.path.join(self.data_dir, f"{node}.binlog")
        eng = RelationalEngine(node, self.catalog, role, path, self.durability, self.clock)
        self.engines[node] = eng
        self.relational_up[node] = True
        return eng

    def _build_shard(self, shard: str) -> None:
        m = self.shard_map.members[shard]
        self._engine(m.master, "master")
        for s in m.slaves:
            self._engine(s, "slave")
        rs_id = self.shard_map.replica_set_of[shard]
        rs = ReplicaSet(rs_id, [f"{rs_id}-n{i}" for i in range(self.members_per_set)], self.timeout)
        rs.listeners.append(self._on_apply)
        self.replica_sets[rs_id] = rs
        self.pipelines[shard] = ReplicationPipeline(
            shard,
            source=lambda s=shard: self.master(s),
            target=lambda r=rs_id: self.replica_sets[r],
            dictionary=lambda: self.catalog.current,
            checkpoints=self.checkpoints,
            batch=self.batch,
            clock=self.clock,
        )

    def _on_apply(self, rs_id: str, op, lsn: int) -> None:
        if isinstance(op, (MarkApplied, CreateCollection)):
            return
        self.cache.invalidate(op_entity(op), rs_id, lsn)

    # -- transport protocol used by the router --------------------------------------------

    @property
    def dictionary(self):
        return self.catalog.current

    def view(self) -> ClusterView:
        return ClusterView(
            dict(self.relational_up),
            {rs_id: rs.view for rs_id, rs in self.replica_sets.items()},
            dict(self.tenants),
        )

    def master(self, shard: str) -> RelationalEngine:
        try:
            node = self.shard_map.members[shard].master
        except KeyError:
            raise UnknownShard(shard) from None
        if not self.relational_up.get(node):
            raise NodeUnavailable(node)
        return self.engines[node]

    def premise(self, endpoint: str) -> PremiseStore:
        store = self.premises.get(endpoint)
        if store is None:
            store = self.premises[endpoint] = PremiseStore(endpoint, self.catalog)
        return store

    def execute(self, target: Target):
        req = target.request
        engine_kind = self.dictionary.binding(req.entity)
        self.request_counts[target.node_id] = self.request_counts.get(target.node_id, 0) + 1
        if target.tier == "premise":
            return self.premise(target.group).execute(req, engine_kind), None
        if target.tier == "relational":
            if not self.relational_up.get(target.node_id):
                raise NodeUnavailable(target.node_id)
            return execute_relational(self.engines[target.node_id], req, target.stale_ok), None
        rs = self.replica_sets[target.group]
        node = rs.member(target.node_id)
        if req.operation in (Operation.RETRIEVE, Operation.QUERY):
            return nosql_read(node.stores, req, engine_kind, req.tenant_id), node.applied_lsn
        lsn = rs.apply(nosql_write_op(req, engine_kind, req.tenant_id), epoch=rs.epoch, node=target.node_id)
        return [{"affected": 1, "lsn": lsn}], lsn

    def dispatch(self, req: Request) -> list:
        with self.lock:
            return self.router.dispatch(req)

    # -- schema -----------------------------------------------------------------------

    def apply_schema(self, schema: EntitySchema):
        with self.lock:
            d = self.catalog.apply(schema)
            if self._schema_log is not None:
                with open(self._schema_log, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(schema_to_doc(schema)) + "\n")
                    fh.flush()
                    if self.durability == "strict":
                        os.fsync(fh.fileno())
            return d

    # -- background work -----------------------------------------------------------------

    def ship_logs(self) -> int:
        """Master -> slave log shipping for every shard."""
        shipped = 0
        for s in self.shard_map.shards:
            m = self.shard_map.members[s]
            if not self.relational_up.get(m.master):
                continue
            master = self.engines[m.master]
            for slave in m.slaves:
                if not self.relational_up.get(slave):
                    continue
                eng = self.engines[slave]
                recs = master.read_log(eng.last_lsn + 1, self.batch * 16)
                if recs:
                    eng.apply_replica(recs)
                    shipped += len(recs)
        return shipped

    def pump(self) -> int:
        """One round of slave shipping, CDC and replica-set streaming."""
        with self.lock:
            moved = self.ship_logs()
            for p in self.pipelines.values():
                before = p.cursor
                p.run_once()
                moved += int(p.cursor != before)
            for rs in self.replica_sets.values():
                moved += rs.replicate()
            return moved

    def drain(self, max_rounds: int = 1_000_000) -> None:
        with self.lock:
            for _ in range(max_rounds):
                moved = self.ship_logs()
                for p in self.pipelines.values():
                    p.drain()
                for rs in self.replica_sets.values():
                    moved += rs.replicate()
                if moved == 0:
                    return

    def tick(self, now: int) -> None:
        """Heartbeats from live members, then failure detection/promotion."""
        with self.lock:
            for rs in self.replica_sets.values():
                for node_id, node in rs.nodes.items():
                    if node.up:
                        rs.heartbeat(node_id, now)
                rs.tick(now)

    def lag(self, shard: str, now: int | None = None):
        return self.pipelines[shard].measure_lag(now)

    # -- failover and scaling ---------------------------------------------------------------

    def crash_relational(self, node: str) -> None:
        self.relational_up[node] = False

    def recover_relational(self, node: str) -> None:
        self.relational_up[node] = True

    def failover_shard(self, shard: str) -> str:
        """Promote the most caught-up live slave; CDC resyncs from it."""
        with self.lock:
            m = self.shard_map.members[shard]
            live = [s for s in m.slaves if self.relational_up.get(s)]
            if not live:
                raise NodeUnavailable(f"shard {shard}: no live slave")
            new_master = min(live, key=lambda s: (-self.engines[s].last_lsn, s))
            self.engines[new_master].promote()
            old = self.engines[m.master]
            old.demote()
            slaves = tuple(s for s in m.slaves if s != new_master)
            self.shard_map = replace_members(self.shard_map, shard, ShardMembers(new_master, slaves))
            self.relational_up[m.master] = False
            self.pipelines[shard].resync()
            return new_master

    def metrics(self, window_seconds: float = 1.0) -> Metrics:
        qps = {n: c / window_seconds for n, c in self.request_counts.items()}
        self.request_counts = {}
        set_lag = {}
        for s in self.shard_map.shards:
            try:
                set_lag[self.shard_map.replica_set_of[s]] = self.lag(s).lag_records
            except Exception:  # noqa: BLE001  unreachable shard reports no lag
                set_lag[self.shard_map.replica_set_of[s]] = 0
        members = {rs_id: [rs.primary] + [m for m in rs.view.members if m != rs.primary]
                   for rs_id, rs in self.replica_sets.items()}
        masters = [self.shard_map.members[s].master for s in self.shard_map.shards]
        return Metrics(qps, members, set_lag, masters, self.cache.stats()["hit_rate"])

    def autoscale(self, now: int, window_seconds: float = 1.0) -> list[ScalingAction]:
        with self.lock:
            actions = self.autoscaler.step(self.metrics(window_seconds), now)
            for a in actions:
                self.execute_action(a, now)
            return actions

    def execute_action(self, action: ScalingAction, now: int = 0) -> None:
        if action.kind == "AddSecondary":
            rs = self.replica_sets[action.target]
            idx = len(rs.nodes)
            while f"{rs.id}-n{idx}" in rs.nodes:
                idx += 1
            rs.add_member(f"{rs.id}-n{idx}", now)
        elif action.kind == "RemoveSecondary":
            rs = self.replica_sets[action.target]
            secondaries = [m for m in rs.view.members if m != rs.primary]
            rs.remove_member(secondaries[-1])
        elif action.kind == "AddShard":
            self.add_shard()

    def add_shard(self, shard: str | None = None):
        """Grow the relational tier by one shard and move the rows that the
        new shard now owns, each move as delete-then-insert."""
        with self.lock:
            if shard is None:
                i = len(self.shard_map.shards)
                while f"s{i}" in self.shard_map.shards:
                    i += 1
                shard = f"s{i}"
            located = []
            for s in self.shard_map.shards:
                eng = self.master(s)
                for entity, table in eng.snapshot().items():
                    for (tenant, key), row in table.items():
                        rk = routing_key(tenant, "|".join(str(v) for v in key))
                        located.append((rk, s, entity, tenant, key, row))
            slaves = len(next(iter(self.shard_map.members.values())).slaves)
            new_map, plan = add_shard(self.shard_map, shard, [x[0] for x in located],
                                      default_members(shard, slaves))
            self.shard_map = new_map
            self._build_shard(shard)
            moving = {m.routing_key for m in plan.moves}
            for rk, s, entity, tenant, key, row in located:
                if rk in moving:
                    self.engines[self.shard_map.members[s].master].run(tenant, [Delete(entity, key)])
                    self.master(shard).run(tenant, [Insert(entity, row)])
            self._rebalance_direct(shard)
            return plan

    def _rebalance_direct(self, new_shard: str) -> None:
        """Move directly written unstructured data whose owner changed."""
        d = self.dictionary
        new_rs = self.replica_sets[self.shard_map.replica_set_of[new_shard]]
        self.drain()
        for rs_id in sorted(self.replica_sets):
            rs = self.replica_sets[rs_id]
            if rs is new_rs or rs.primary is None:
                continue
            stores = rs.nodes[rs.primary].stores
            ops_out, ops_in = [], []

            def moves(tenant, key):
                return self.shard_map.owner(routing_key(tenant, key)) == new_shard

            for (ns, tenant), kv in sorted(stores.kv.items()):
                for k, v in kv.scan_prefix(""):
                    if moves(tenant, k):
                        ops_out.append(KvDelete(ns, k, tenant=tenant))
                        ops_in.append(KvPut(ns, k, v, tenant=tenant))
            for (layer, tenant), st in sorted(stores.spatial.items()):
                for pid in sorted(st.points):
                    p = st.points[pid]
                    if moves(tenant, pid):
                        ops_out.append(StDelete(layer, pid, tenant=tenant))
                        ops_in.append(StPut(layer, pid, p.x, p.y, p.t, dict(p.payload), tenant=tenant))
            for name in sorted(stores.collections):
                if name not in d.entities or d.binding(name) is not EngineKind.DOCUMENT:
                    continue
                for tenant, doc in stores.documents(name):
                    if moves(tenant, doc["_id"]):
                        fields = {k: v for k, v in doc.items() if k != "_id"}
                        ops_out.append(DeleteDoc(name, doc["_id"], tenant=tenant))
                        ops_in.append(UpsertDoc(name, doc["_id"], fields, tenant=tenant))
            for (name, tenant), g in sorted(stores.graphs.items()):
                if name not in d.entities or d.binding(name) is not EngineKind.GRAPH:
                    continue
                if not moves(tenant, f"@{name}"):
                    continue
                for n in sorted(g.nodes):
                    ops_in.append(UpsertNode(name, n, dict(g.nodes[n]), tenant=tenant))
                for src, dst, label in g.edges():
                    ops_in.append(UpsertEdge(name, src, dst, label, tenant=tenant))
                for n in sorted(g.nodes):
                    ops_out.append(DeleteNode(name, n, tenant=tenant))
            for op in ops_in:
                new_rs.apply(op, epoch=new_rs.epoch)
            for op in ops_out:
                rs.apply(op, epoch=rs.epoch)
        self.drain()
