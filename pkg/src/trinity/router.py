"""Request routing and scatter/gather (the load balancer tier).

:func:`route` is a pure function of the request, dictionary, shard map,
health view and a round-robin ticket. :class:`Router` adds the ticket
counter, the OLAP cache and the one-retry policy for stale-ok reads.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Protocol

from .cache import CacheEntry, QueryCache, make_key
from .data_model import DataDictionary, EngineKind, Placement, TenantConfig, resolve_placement
from .errors import (
    CrossShardTransaction,
    NodeUnavailable,
    NoHealthyTarget,
    OpNotAllowed,
    PartialMissing,
    TypeMismatch,
)
from .nosql.replica_set import ReplicaSetView
from .predicate import AGGREGATES, parse_predicate, sort_key
from .relational.engine import pk_key
from .shard_manager import ShardMap, routing_key


class RequestKind(str, Enum):
    OLTP = "OLTP"
    OLAP = "OLAP"


class Operation(str, Enum):
    CREATE = "Create"
    RETRIEVE = "Retrieve"
    UPDATE = "Update"
    DELETE = "Delete"
    QUERY = "Query"


class Consistency(str, Enum):
    FRESH = "Fresh"
    STALE_OK = "StaleOk"


READS = (Operation.RETRIEVE, Operation.QUERY)


@dataclass(frozen=True)
class Gather:
    mode: str = "Union"  # Single | Union | OrderedMergeBy | Aggregate
    field: str | None = None
    fn: str | None = None

    def __post_init__(self):
        if self.mode not in ("Single", "Union", "OrderedMergeBy", "Aggregate"):
            raise TypeMismatch(f"unknown gather mode {self.mode!r}")
        if self.mode == "OrderedMergeBy" and not self.field:
            raise TypeMismatch("OrderedMergeBy needs a field")
        if self.mode == "Aggregate" and self.fn not in AGGREGATES:
            raise TypeMismatch(f"aggregate must be one of {AGGREGATES}")

    def text(self) -> str:
        return f"{self.mode}:{self.fn or ''}:{self.field or ''}"


SINGLE = Gather("Single")
UNION = Gather("Union")


@dataclass(frozen=True)
class Request:
    tenant_id: str
    kind: RequestKind
    entity: str
    operation: Operation
    row: Mapping | None = None
    pk: Any = None
    changes: Mapping | None = None
    predicate: tuple = ()
    consistency: Consistency = Consistency.FRESH
    gather: Gather | None = None
    key: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "predicate", parse_predicate(self.predicate))

    @property
    def is_read(self) -> bool:
        return self.operation in READS


@dataclass(frozen=True)
class Target:
    node_id: str
    tier: str        # relational | nosql | premise
    group: str       # shard id, replica set id or premise endpoint
    request: Request
    stale_ok: bool = False


@dataclass(frozen=True)
class RouteDecision:
    engine: EngineKind
    targets: tuple[Target, ...]
    gather: Gather

    def __post_init__(self):
        if not self.targets:
            raise NoHealthyTarget("empty target list")
        if (self.gather.mode == "Single") != (len(self.targets) == 1):
            raise TypeMismatch("Single gather requires exactly one target")


@dataclass(frozen=True)
class ClusterView:
    """Health as seen by the router: relational node liveness plus the
    membership view of every replica set."""

    relational_up: Mapping[str, bool] = field(default_factory=dict)
    replica_sets: Mapping[str, ReplicaSetView] = field(default_factory=dict)
    tenants: Mapping[str, TenantConfig] = field(default_factory=dict)

    def up(self, node: str) -> bool:
        return self.relational_up.get(node, False)


def key_text(schema, pk) -> str:
    return "|".join(str(v) for v in pk_key(schema, pk))


def _gather_for(req: Request, n: int) -> Gather:
    if n == 1:
        return SINGLE
    g = req.gather or UNION
    return UNION if g.mode == "Single" else g


def _sub_request(req: Request, gather: Gather) -> Request:
    # partials must already be ordered / pre-aggregated for recombination;
    # a lone target still runs the caller's ordering or aggregate itself
    if gather.mode == "Single":
        return req
    return replace(req, gather=gather)


def _pick_member(view: ReplicaSetView, consistency: Consistency, rr: int) -> tuple[str, bool]:
    if consistency is Consistency.FRESH:
        if view.primary is None or not view.healthy(view.primary):
            raise NoHealthyTarget(f"{view.id}: primary unavailable")
        return view.primary, False
    secondaries = view.healthy_secondaries()
    if secondaries:
        return secondaries[rr % len(secondaries)], True
    if view.primary is not None and view.healthy(view.primary):
        return view.primary, True
    raise NoHealthyTarget(f"{view.id}: no healthy member")


def _rs_view(view: ClusterView, rs_id: str) -> ReplicaSetView:
    v = view.replica_sets.get(rs_id)
    if v is None:
        raise NoHealthyTarget(f"unknown replica set {rs_id}")
    return v


def route(req: Request, dictionary: DataDictionary, shard_map: ShardMap, view: ClusterView,
          rr: int = 0) -> RouteDecision:
    schema = dictionary.schema(req.entity)
    engine = dictionary.binding(req.entity)
    placement = resolve_placement(schema, view.tenants.get(req.tenant_id))
    if placement.placement is Placement.TENANT_PREMISE:
        t = Target(f"premise:{placement.endpoint}", "premise", placement.endpoint, req)
        return RouteDecision(engine, (t,), SINGLE)

    if req.kind is RequestKind.OLTP:
        if engine is not EngineKind.RELATIONAL:
            raise OpNotAllowed(f"OLTP on {req.entity}, which is bound to {engine.value}")
        if req.operation is Operation.QUERY:
            raise OpNotAllowed("Query is an OLAP operation")
        if req.operation is Operation.CREATE:
            if req.row is None:
                raise TypeMismatch("Create needs a row")
            pk = {n: req.row.get(n) for n in schema.primary_key}
        else:
            pk = req.pk
        if pk is None:
            if req.operation is not Operation.RETRIEVE:
                if len(shard_map.shards) > 1:
                    raise CrossShardTransaction(f"{req.operation.value} without a key spans shards")
                raise TypeMismatch(f"{req.operation.value} needs a key")
            gather = _gather_for(req, len(shard_map.shards))
            targets = []
            for s in sorted(shard_map.shards):
                master = shard_map.members[s].master
                if not view.up(master):
                    raise NoHealthyTarget(f"shard {s} master {master} down")
                targets.append(Target(master, "relational", s, _sub_request(req, gather)))
            return RouteDecision(engine, tuple(targets), gather)
        shard = shard_map.owner(routing_key(req.tenant_id, key_text(schema, pk)))
        members = shard_map.members[shard]
        if view.up(members.master):
            return RouteDecision(engine, (Target(members.master, "relational", shard, req),), SINGLE)
        if req.is_read and req.consistency is Consistency.STALE_OK:
            slaves = [s for s in members.slaves if view.up(s)]
            if slaves:
                node = slaves[rr % len(slaves)]
                return RouteDecision(engine, (Target(node, "relational", shard, req, True),), SINGLE)
        raise NoHealthyTarget(f"shard {shard} master {members.master} down")

    # OLAP tier
    if engine is EngineKind.RELATIONAL and not req.is_read:
        raise OpNotAllowed("structured data is written through OLTP")
    if not req.is_read:
        rs_id = shard_map.replica_set_of[_unstructured_shard(req, engine, shard_map)]
        v = _rs_view(view, rs_id)
        node, _ = _pick_member(v, Consistency.FRESH, rr)
        return RouteDecision(engine, (Target(node, "nosql", rs_id, req),), SINGLE)
    if engine is EngineKind.GRAPH or (req.key is not None and engine is not EngineKind.RELATIONAL):
        groups = [shard_map.replica_set_of[_unstructured_shard(req, engine, shard_map)]]
    else:
        groups = [shard_map.replica_set_of[s] for s in sorted(shard_map.shards)]
    gather = _gather_for(req, len(groups))
    targets = []
    for i, rs_id in enumerate(groups):
        node, stale = _pick_member(_rs_view(view, rs_id), req.consistency, rr + i)
        targets.append(Target(node, "nosql", rs_id, _sub_request(req, gather), stale))
    return RouteDecision(engine, tuple(targets), gather)


def _unstructured_shard(req: Request, engine: EngineKind, shard_map: ShardMap) -> str:
    """Graphs live whole on one set (k-hop needs every edge); other
    unstructured data is spread by key."""
    if engine is EngineKind.GRAPH:
        return shard_map.owner(routing_key(req.tenant_id, f"@{req.entity}"))
    if req.key is None:
        raise TypeMismatch(f"{req.operation.value} on {req.entity} needs a key")
    return shard_map.owner(routing_key(req.tenant_id, req.key))


def aggregate(gather: Gather, partials: list, expected: int | None = None) -> list:
    """Recombine per-target results according to the gather plan."""
    if expected is not None and len(partials) != expected:
        raise PartialMissing(f"{len(partials)} of {expected} partials")
    if any(p is None for p in partials):
        raise PartialMissing("a target returned nothing")
    if gather.mode == "Single":
        if len(partials) != 1:
            raise PartialMissing("Single gather expects one partial")
        return list(partials[0])
    if gather.mode == "Union":
        return [row for p in partials for row in p]
    if gather.mode == "OrderedMergeBy":
        return list(heapq.merge(*partials, key=sort_key(gather.field)))
    fn = gather.fn
    values = []
    for p in partials:
        if len(p) != 1 or fn not in p[0]:
            raise TypeMismatch(f"partial {p!r} is not a {fn} aggregate")
        values.append(p[0][fn])
    if fn in ("count", "sum"):
        return [{fn: sum(values)}]
    present = [v for v in values if v is not None]
    if not present:
        return [{fn: None}]
    return [{fn: min(present) if fn == "min" else max(present)}]


class Transport(Protocol):
    dictionary: DataDictionary
    shard_map: ShardMap

    def view(self) -> ClusterView: ...

    def execute(self, target: Target) -> tuple[list, int | None]: ...


class Router:
    def __init__(self, transport: Transport, cache: QueryCache | None = None, clock=None):
        self.transport = transport
        self.cache = cache
        self.clock = clock or (lambda: 0)
        self._tickets = itertools.count()
        self.retries = 0
        self.last_decision: RouteDecision | None = None

    def route(self, req: Request) -> RouteDecision:
        t = self.transport
        return route(req, t.dictionary, t.shard_map, t.view(), next(self._tickets))

    def _cache_key(self, req: Request, decision: RouteDecision):
        if (self.cache is None or req.kind is not RequestKind.OLAP or not req.is_read
                or req.consistency is not Consistency.STALE_OK):
            return None
        shape = f"{decision.gather.text()}|{req.key or ''}|{sorted((req.row or {}).items())!r}"
        return make_key(req.tenant_id, req.entity, req.predicate, decision.engine.value, shape)

    def _alternate(self, target: Target) -> Target | None:
        view = self.transport.view()
        if target.tier == "nosql":
            v = view.replica_sets.get(target.group)
            if v is None:
                return None
            others = [m for m in v.members if m != target.node_id and v.healthy(m)]
            if not others:
                return None
            return replace(target, node_id=others[0], stale_ok=True)
        if target.tier == "relational":
            members = self.transport.shard_map.members[target.group]
            others = [n for n in (members.master, *members.slaves)
                      if n != target.node_id and view.up(n)]
            if not others:
                return None
            return replace(target, node_id=others[0], stale_ok=True)
        return None

    def dispatch(self, req: Request) -> list:
        decision = self.route(req)
        self.last_decision = decision
        key = self._cache_key(req, decision)
        if key is not None:
            hit = self.cache.lookup(key)
            if hit is not None:
                return list(hit.result)
        partials = []
        as_of: dict[str, int] = {}
        for target in decision.targets:
            try:
                result, lsn = self.transport.execute(target)
            except NodeUnavailable:
                retryable = req.is_read and req.consistency is Consistency.STALE_OK
                alt = self._alternate(target) if retryable else None
                if alt is None:
                    if retryable:
                        raise NoHealthyTarget(f"{target.group}: no alternate member") from None
                    raise
                self.retries += 1
                try:
                    result, lsn = self.transport.execute(alt)
                except NodeUnavailable:
                    raise NoHealthyTarget(f"{target.group}: alternate {alt.node_id} also down") from None
                target = alt
            partials.append(result)
            if lsn is not None:
                as_of[target.group] = lsn
        result = aggregate(decision.gather, partials, len(decision.targets))
        if key is not None:
            self.cache.insert(key, CacheEntry(tuple(result), as_of, self.clock()))
        return result
