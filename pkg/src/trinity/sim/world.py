"""Deterministic discrete-event simulation of the whole stack.

Ticks are simulated milliseconds. Every randomized choice comes from one
``random.Random(seed)``; events run in (tick, insertion order), and nothing
iterates an unordered collection, so a (scenario, seed) pair fixes the
trace byte for byte.

The replica-set objects keep the authoritative membership view; in this
harness they stand in for the coordination service (node ``coord``).
Everything a node learns about that view travels in messages, so deposed
primaries, stale pulls and divergent logs all arise naturally.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass
from typing import Any

from ..autoscaler import NONE, Autoscaler, Metrics
from ..cache import QueryCache
from ..cluster import execute_relational, nosql_read, nosql_write_op
from ..data_model import Catalog, schema_from_doc
from ..errors import (
    LsnGap,
    NodeUnavailable,
    NoHealthyTarget,
    NoPrimary,
    PrimaryUnavailable,
    ScenarioParseError,
    ShardUnreachable,
    TrinityError,
    UnknownNode,
)
from ..nosql.engines import KvPut, MarkApplied, CreateCollection, op_entity
from ..nosql.replica_set import MemberState, ReplicaSet
from ..relational.engine import RelationalEngine
from ..replication import MemoryCheckpointStore, ReplicationPipeline, SimulatedCrash, expected_documents, mappings_for
from ..router import ClusterView, Consistency, Gather, Operation, Request, RequestKind, Router
from ..shard_manager import make_shard_map
from ..values import to_jsonable
from .invariants import check_invariants
from .scenario import Command, Scenario, parse_scenario, workload_of
from .trace import TraceEvent, event

BUILTIN_SCHEMA = (
    {"entity": "orders", "kind": "Structured",
     "fields": [{"name": "id", "scalar": "Int64"}, {"name": "amount", "scalar": "Int64"},
                {"name": "region", "scalar": "Text"}, {"name": "cust", "scalar": "Text", "nullable": True}],
     "primary_key": ["id"]},
    {"entity": "sessions", "kind": "SemiStructured", "variant": "KeyValue"},
)
TENANTS = ("t1", "t2")
REGIONS = ("eu", "us", "ap")
COORD, CLIENT = "coord", "client"
MAX_DRAIN_TICKS = 200_000


# -- faults ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Crash:
    node: str


@dataclass(frozen=True)
class Recover:
    node: str


@dataclass(frozen=True)
class Partition:
    groups: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class Heal:
    pass


@dataclass(frozen=True)
class SimEvent:
    at: int
    kind: str          # cmd | deliver | tick | work
    payload: Any = None


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    kind: str
    body: tuple


class TracingCache(QueryCache):
    def __init__(self, world: "World", capacity: int):
        super().__init__(capacity)
        self.world = world

    def lookup(self, key):
        entry = super().lookup(key)
        if entry is not None:
            as_of = ",".join(f"{rs}:{lsn}" for rs, lsn in sorted(entry.as_of.items())) or "-"
            self.world.emit("cache-hit", entity=key.entity, as_of=as_of)
        return entry


def _doc_order(item):
    return item[0], item[1], str(item[2]["_id"])


def _digest(obj) -> str:
    raw = json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


class World:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.rng = random.Random(scenario.seed)
        self.now = 0
        self.trace: list[TraceEvent] = []
        self._queue: list = []
        self._seq = itertools.count()
        self.built = False
        self.stopped = False
        self.max_delay = 5
        self.drop = 0.0
        self.link_drop: dict[frozenset, float] = {}
        self.partitions: list[tuple[tuple[str, ...], ...]] = []
        self.down: set[str] = set()
        self.in_flight = 0

    # -- plumbing ---------------------------------------------------------------------

    def emit(self, kind: str, /, **fields) -> None:
        self.trace.append(event(self.now, kind, **fields))

    def push(self, at: int, kind: str, payload=None) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), SimEvent(at, kind, payload)))

    def nodes(self) -> list[str]:
        out = [COORD, CLIENT]
        for s in self.shard_map.shards:
            m = self.shard_map.members[s]
            out += [m.master, *m.slaves, f"cdc-{s}"]
        for rs_id in sorted(self.rs):
            out += list(self.rs[rs_id].view.members)
        return out

    def _known(self, node: str) -> None:
        if node not in self.nodes():
            raise UnknownNode(node)

    def is_up(self, node: str) -> bool:
        return node not in self.down

    def _group(self, groups, node):
        wild = None
        for i, g in enumerate(groups):
            if node in g:
                return i
            if "*" in g:
                wild = i
        return wild

    def cut(self, a: str, b: str) -> bool:
        if a == b:
            return False
        for groups in self.partitions:
            ga, gb = self._group(groups, a), self._group(groups, b)
            if ga is not None and gb is not None and ga != gb:
                return True
        return False

    def reachable(self, a: str, b: str) -> bool:
        return self.is_up(a) and self.is_up(b) and not self.cut(a, b)

    def send(self, src: str, dst: str, kind: str, *body) -> None:
        msg = Message(src, dst, kind, body)
        if self.cut(src, dst):
            self.emit("drop", msg=kind, src=src, dst=dst, why="partition")
            return
        p = self.link_drop.get(frozenset((src, dst)), self.drop)
        if p > 0 and self.rng.random() < p:
            self.emit("drop", msg=kind, src=src, dst=dst, why="loss")
            return
        if kind in ("write", "txn"):
            self.in_flight += 1
        self.push(self.now + self.rng.randint(1, self.max_delay), "deliver", msg)

    # -- construction ---------------------------------------------------------------------

    def build(self, cmd: Command | None = None) -> None:
        opt = (lambda k, d: int(float(cmd.option(k, d)))) if cmd else (lambda k, d: d)
        shards, slaves, members = opt("shards", 1), opt("slaves", 1), opt("members", 3)
        self.hb = opt("heartbeat", 100)
        self.timeout = opt("timeout", 500)
        self.pull_every = opt("pull", 20)
        self.cdc_every = opt("cdc", 10)
        self.batch = opt("batch", 64)
        if min(shards, members, self.hb, self.pull_every, self.cdc_every, self.batch) < 1 or slaves < 0:
            raise ScenarioParseError("topology values must be positive")
        self.catalog = Catalog()
        for doc in BUILTIN_SCHEMA:
            self.catalog.apply(schema_from_doc(doc))
        self.shard_map = make_shard_map([f"s{i}" for i in range(shards)], slaves)
        clock = lambda: self.now  # noqa: E731
        self.engines: dict[str, RelationalEngine] = {}
        self.rs: dict[str, ReplicaSet] = {}
        self.rs_of: dict[str, str] = {}
        self.believes: dict[str, tuple[int, str | None]] = {}
        self.pipelines: dict[str, ReplicationPipeline] = {}
        self.pipeline_down: set[str] = set()
        self.armed: dict[str, str] = {}
        self.stalled: dict[str, str] = {}
        for s in self.shard_map.shards:
            m = self.shard_map.members[s]
            self.engines[m.master] = RelationalEngine(m.master, self.catalog, "master", clock=clock)
            for sl in m.slaves:
                self.engines[sl] = RelationalEngine(sl, self.catalog, "slave", clock=clock)
            rs_id = self.shard_map.replica_set_of[s]
            rs = ReplicaSet(rs_id, [f"{rs_id}-n{i}" for i in range(members)], self.timeout)
            rs.listeners.append(self._on_rs_apply)
            self.rs[rs_id] = rs
            for n in rs.view.members:
                rs.detector.heartbeat(n, 0)
                self.rs_of[n] = rs_id
                self.believes[n] = (rs.epoch, rs.primary)
            self.emit("primary", rs=rs_id, epoch=rs.epoch, node=rs.primary)
            self.pipelines[s] = ReplicationPipeline(
                s, source=lambda s=s: self._cdc_source(s), target=lambda r=rs_id: self.rs[r],
                dictionary=lambda: self.catalog.current, checkpoints=MemoryCheckpointStore(),
                batch=self.batch, clock=clock, fault=lambda point, s=s: self._fault(s, point))
        self.cache = TracingCache(self, opt("cache", 256))
        self.router = Router(self, self.cache, clock)
        self.autoscaler = Autoscaler()
        self.autoscale_on = False
        self.counts: dict[str, int] = {}
        self.pending_pull: dict[str, int] = {}
        self.diverged: set[str] = set()
        self.wids = itertools.count(1)
        self.acked: dict[int, tuple[str, str, int, int]] = {}
        self.row_ids: list[int] = []
        self._row_tenant: dict[int, str] = {}
        self.next_id = itertools.count(1)
        self.workloads: list = []
        self.built = True
        base = self.now
        self.push(base + self.hb, "tick", "heartbeat")
        self.push(base + self.hb + self.hb // 2, "tick", "coord")
        self.push(base + self.pull_every, "tick", "pull")
        self.push(base + self.cdc_every, "tick", "cdc")
        self.emit("topology", shards=shards, slaves=slaves, members=members)

    # -- transport protocol for the router (reads are synchronous RPCs) --------------------

    @property
    def dictionary(self):
        return self.catalog.current

    def view(self):
        up = {n: self.is_up(n) for n in sorted(self.engines)}
        return ClusterView(up, {r: self.rs[r].view for r in sorted(self.rs)}, {})

    def execute(self, target):
        node = target.node_id
        if not self.reachable(CLIENT, node):
            self.emit("drop", msg="read", src=CLIENT, dst=node, why="unreachable")
            raise NodeUnavailable(node)
        self.counts[node] = self.counts.get(node, 0) + 1
        req = target.request
        engine = self.dictionary.binding(req.entity)
        if target.tier == "relational":
            return execute_relational(self.engines[node], req, target.stale_ok), None
        n = self.rs[target.group].nodes[node]
        return nosql_read(n.stores, req, engine, req.tenant_id), n.applied_lsn

    # -- replica-set side effects ---------------------------------------------------------

    def _on_rs_apply(self, rs_id: str, op, lsn: int) -> None:
        rs = self.rs[rs_id]
        self._accepted(rs_id, rs.primary, rs.epoch, lsn, op, None)

    def _accepted(self, rs_id, node, epoch, lsn, op, wid) -> None:
        fields = dict(rs=rs_id, node=node, epoch=epoch, lsn=lsn, entity=op_entity(op))
        if wid is not None:
            fields["w"] = wid
        self.emit("accept", **fields)
        if not isinstance(op, (MarkApplied, CreateCollection)):
            entity = op_entity(op)
            self.cache.invalidate(entity, rs_id, lsn)
            self.emit("invalidate", entity=entity, rs=rs_id, lsn=lsn)

    def _cdc_source(self, shard: str) -> RelationalEngine:
        master = self.shard_map.members[shard].master
        if not self.reachable(f"cdc-{shard}", master):
            raise NodeUnavailable(master)
        return self.engines[master]

    def _fault(self, shard: str, point: str) -> None:
        if self.armed.get(shard) == point:
            del self.armed[shard]
            raise SimulatedCrash(point)

    # -- faults ---------------------------------------------------------------------------

    def inject(self, fault) -> None:
        if isinstance(fault, Crash):
            self._known(fault.node)
            self.down.add(fault.node)
            if fault.node in self.rs_of:
                self.rs[self.rs_of[fault.node]].nodes[fault.node].up = False
            self.pending_pull.pop(fault.node, None)
            self.emit("crash", node=fault.node)
        elif isinstance(fault, Recover):
            self._known(fault.node)
            self.down.discard(fault.node)
            if fault.node in self.rs_of:
                self.rs[self.rs_of[fault.node]].nodes[fault.node].up = True
            self.emit("recover", node=fault.node)
        elif isinstance(fault, Partition):
            for g in fault.groups:
                for n in g:
                    if n != "*":
                        self._known(n)
            self.partitions.append(fault.groups)
            self.emit("partition", groups="|".join(",".join(g) for g in fault.groups))
        elif isinstance(fault, Heal):
            self.partitions = []
            self.emit("heal")
        else:
            raise TypeError(f"unknown fault {fault!r}")

    # -- scripted commands ----------------------------------------------------------------------

    def command(self, cmd: Command) -> None:
        name, args = cmd.name, cmd.args
        if name == "topology":
            return
        if name == "workload":
            w = workload_of(cmd)
            if w.entity not in self.dictionary.entities:
                raise ScenarioParseError(f"line {cmd.line}: unknown entity {w.entity!r}", line=cmd.line)
            self.workloads.append(w)
            self.emit("workload", kind=w.kind, entity=w.entity, rate=w.rate)
            self.push(self.now, "work", len(self.workloads) - 1)
        elif name == "crash":
            self.inject(Crash(args[0]))
        elif name == "recover":
            self.inject(Recover(args[0]))
        elif name == "partition":
            self.inject(Partition(tuple(tuple(g.split(",")) for g in args[0].split("|"))))
        elif name == "heal":
            self.inject(Heal())
        elif name == "kill-primary":
            rs = self.rs.get(args[0])
            if rs is None:
                raise UnknownNode(args[0])
            if rs.primary is not None:
                self.emit("kill", rs=args[0], node=rs.primary)
                self.inject(Crash(rs.primary))
        elif name == "crash-pipeline":
            shard = self._shard(args[0])
            if len(args) == 2:
                self.armed[shard] = args[1]
                self.emit("arm-crash", shard=shard, point=args[1])
            else:
                self.pipelines[shard].restart()
                self.pipeline_down.add(shard)
                self.emit("cdc-crash", shard=shard, point="stopped")
        elif name == "restart-pipeline":
            shard = self._shard(args[0])
            self.pipeline_down.discard(shard)
            self.emit("cdc-restart", shard=shard)
        elif name == "pause-pipeline":
            self.pipelines[self._shard(args[0])].paused = True
            self.emit("cdc-pause", shard=args[0])
        elif name == "resume-pipeline":
            self.pipelines[self._shard(args[0])].paused = False
            self.emit("cdc-resume", shard=args[0])
        elif name == "autoscale":
            self.autoscale_on = args[0] == "on"
            self.emit("autoscale", state=args[0])
        elif name == "delay":
            link = cmd.option("link")
            drop = float(cmd.option("drop", self.drop))
            if not 0 <= drop <= 1:
                raise ScenarioParseError(f"line {cmd.line}: drop must lie in [0, 1]", line=cmd.line)
            if link:
                a, _, b = link.partition(",")
                self._known(a)
                self._known(b)
                self.link_drop[frozenset((a, b))] = drop
            else:
                self.drop = drop
            self.max_delay = max(1, int(float(cmd.option("max", self.max_delay))))
            self.emit("delay", max=self.max_delay, drop=drop, link=link or "*")

    def _shard(self, name: str) -> str:
        if name.startswith("cdc-"):
            name = name[4:]
        if name not in self.pipelines:
            raise UnknownNode(name)
        return name

    # -- periodic activity ------------------------------------------------------------------------

    def periodic(self, name: str) -> None:
        getattr(self, f"_tick_{name}")()
        every = {"heartbeat": self.hb, "coord": self.hb, "pull": self.pull_every, "cdc": self.cdc_every}[name]
        self.push(self.now + every, "tick", name)

    def _tick_heartbeat(self) -> None:
        for rs_id in sorted(self.rs):
            for n in self.rs[rs_id].view.members:
                if self.is_up(n):
                    self.send(n, COORD, "hb", rs_id, n, n in self.diverged)

    def _tick_coord(self) -> None:
        if not self.is_up(COORD):
            return
        for rs_id in sorted(self.rs):
            rs = self.rs[rs_id]
            before = rs.view
            applied = {m: rs.nodes[m].applied_lsn for m in before.members}
            after = rs.tick(self.now)
            for m in after.members:
                if before.states[m] is not after.states[m]:
                    self.emit("state", rs=rs_id, node=m, was=before.states[m].value, now=after.states[m].value)
            if after.epoch != before.epoch:
                cands = [applied[m] for m in after.members if m != before.primary and after.healthy(m)]
                self.emit("promote", rs=rs_id, epoch=after.epoch, node=after.primary, old=before.primary,
                          applied=applied[after.primary], max=max(cands))
                self.believes[after.primary] = (after.epoch, after.primary)
        if self.autoscale_on and not self.stopped:
            self._autoscale()
        self.counts = {}

    def _tick_pull(self) -> None:
        for rs_id in sorted(self.rs):
            rs = self.rs[rs_id]
            for n in rs.view.members:
                epoch, primary = self.believes[n]
                if not self.is_up(n) or primary in (None, n):
                    continue
                if self.now - self.pending_pull.get(n, -10**9) < 5 * self.pull_every:
                    continue
                self.pending_pull[n] = self.now
                self.send(n, primary, "pull", rs_id, rs.nodes[n].applied_lsn)
        for s in self.shard_map.shards:
            m = self.shard_map.members[s]
            for sl in m.slaves:
                if not self.is_up(sl) or self.now - self.pending_pull.get(sl, -10**9) < 5 * self.pull_every:
                    continue
                self.pending_pull[sl] = self.now
                self.send(sl, m.master, "rpull", s, self.engines[sl].last_lsn + 1)

    def _tick_cdc(self) -> None:
        for s in self.shard_map.shards:
            p = self.pipelines[s]
            if s in self.pipeline_down or p.paused:
                continue
            rs = self.rs[self.shard_map.replica_set_of[s]]
            worker = f"cdc-{s}"
            if rs.primary is None or not self.reachable(worker, rs.primary):
                self._stall(s, "primary")
                continue
            before = p.checkpoint.last_applied_lsn
            try:
                cp = p.run_once()
            except (ShardUnreachable, NodeUnavailable):
                self._stall(s, "source")
                continue
            except (PrimaryUnavailable, NoPrimary):
                self._stall(s, "primary")
                continue
            except SimulatedCrash as exc:
                self.emit("cdc-crash", shard=s, point=str(exc))
                p.restart()
                continue
            self.stalled.pop(s, None)
            if cp.last_applied_lsn != before:
                self.emit("checkpoint", shard=s, lsn=cp.last_applied_lsn)

    def _stall(self, shard: str, why: str) -> None:
        if self.stalled.get(shard) != why:
            self.stalled[shard] = why
            self.emit("cdc-stall", shard=shard, why=why)

    def _autoscale(self) -> None:
        scale = 1000 / self.hb
        qps = {n: c * scale for n, c in sorted(self.counts.items())}
        members = {r: [self.rs[r].primary] + [m for m in self.rs[r].view.members if m != self.rs[r].primary]
                   for r in sorted(self.rs) if self.rs[r].primary is not None}
        lag = {}
        for s in self.shard_map.shards:
            try:
                lag[self.shard_map.replica_set_of[s]] = self.pipelines[s].measure_lag(self.now).lag_records
            except TrinityError:
                lag[self.shard_map.replica_set_of[s]] = 0
        masters = [self.shard_map.members[s].master for s in self.shard_map.shards]
        metrics = Metrics(qps, members, lag, masters, self.cache.stats()["hit_rate"])
        for a in self.autoscaler.step(metrics, self.now):
            if a == NONE:
                continue
            self.emit("scale", action=a.kind, target=a.target or "-")
            if a.kind == "AddSecondary":
                rs = self.rs[a.target]
                i = len(rs.nodes)
                while f"{rs.id}-n{i}" in rs.nodes or f"{rs.id}-n{i}" in self.rs_of:
                    i += 1
                node = f"{rs.id}-n{i}"
                rs.add_member(node, self.now)
                self.rs_of[node] = rs.id
                self.believes[node] = (rs.epoch, rs.primary)
                self.emit("add-member", rs=rs.id, node=node)
            elif a.kind == "RemoveSecondary":
                rs = self.rs[a.target]
                node = [m for m in rs.view.members if m != rs.primary][-1]
                rs.remove_member(node)
                self.pending_pull.pop(node, None)
                self.diverged.discard(node)
                self.emit("remove-member", rs=rs.id, node=node)
            # AddShard needs a synchronous migration; the simulator records it only.

    # -- workloads ---------------------------------------------------------------------------------

    def work(self, idx: int) -> None:
        w = self.workloads[idx]
        if self.stopped or (w.until is not None and self.now > w.until):
            return
        roll = self.rng.randrange(sum(w.mix))
        choice = 0
        while roll >= w.mix[choice]:
            roll -= w.mix[choice]
            choice += 1
        tenant = self.rng.choice(TENANTS)
        try:
            if w.kind == "oltp":
                self._oltp(w.entity, tenant, choice)
            elif w.kind == "kv":
                self._kv(w.entity, tenant, choice)
            else:
                self._olap(w.entity, tenant, choice)
        except (NoHealthyTarget, NodeUnavailable) as exc:
            self.emit("reject", kind=w.kind, code=exc.code)
        self.push(self.now + max(1, 1000 // w.rate), "work", idx)

    def _route(self, req: Request, key) -> Any:
        decision = self.router.route(req)
        self.emit("route", tenant=req.tenant_id, entity=req.entity, key=key,
                  map=self.shard_map.version, group=decision.targets[0].group)
        return decision.targets[0]

    def _oltp(self, entity: str, tenant: str, choice: int) -> None:
        if choice == 0 or not self.row_ids:
            rid = next(self.next_id)
            row = {"id": rid, "amount": self.rng.randrange(1000), "region": self.rng.choice(REGIONS)}
            req = Request(tenant, RequestKind.OLTP, entity, Operation.CREATE, row=row)
        else:
            rid = self.row_ids[self.rng.randrange(len(self.row_ids))]
            tenant = self._row_tenant[rid]
            if choice == 1:
                req = Request(tenant, RequestKind.OLTP, entity, Operation.UPDATE, pk=rid,
                              changes={"amount": self.rng.randrange(1000)})
            else:
                req = Request(tenant, RequestKind.OLTP, entity, Operation.DELETE, pk=rid)
        target = self._route(req, rid)
        self.send(CLIENT, target.node_id, "txn", target.group, rid, req)

    def _kv(self, entity: str, tenant: str, choice: int) -> None:
        key = f"k{self.rng.randrange(64)}"
        if choice == 0:
            wid = next(self.wids)
            req = Request(tenant, RequestKind.OLAP, entity, Operation.CREATE, key=key, row={"value": f"w{wid}"})
        else:
            wid = None
            req = Request(tenant, RequestKind.OLAP, entity, Operation.DELETE, key=key)
        target = self._route(req, key)
        op = nosql_write_op(req, self.dictionary.binding(entity), tenant)
        self.send(CLIENT, target.node_id, "write", target.group, wid, op)

    def _olap(self, entity: str, tenant: str, choice: int) -> None:
        consistency = Consistency.STALE_OK if choice == 0 else Consistency.FRESH
        floor = self.rng.choice((0, 250, 500, 750))
        req = Request(tenant, RequestKind.OLAP, entity, Operation.QUERY,
                      predicate=[["amount", ">=", floor]], consistency=consistency,
                      gather=Gather("Aggregate", "amount", "count"))
        result = self.router.dispatch(req)
        self.emit("read", tenant=tenant, entity=entity, floor=floor, consistency=consistency.value,
                  count=result[0]["count"])

    # -- message delivery --------------------------------------------------------------------------

    def deliver(self, msg: Message) -> None:
        if msg.kind in ("write", "txn"):
            self.in_flight -= 1
        if not self.is_up(msg.dst) or self.cut(msg.src, msg.dst) or not self._exists(msg.dst):
            self.emit("drop", msg=msg.kind, src=msg.src, dst=msg.dst, why="unreachable")
            return
        self.emit("deliver", msg=msg.kind, src=msg.src, dst=msg.dst)
        getattr(self, "_on_" + msg.kind.replace("-", "_"))(msg)

    def _exists(self, node: str) -> bool:
        if node in (COORD, CLIENT) or node in self.engines:
            return True
        rs_id = self.rs_of.get(node)
        return rs_id is not None and node in self.rs[rs_id].nodes

    def _on_hb(self, msg: Message) -> None:
        rs_id, node, diverged = msg.body
        rs = self.rs[rs_id]
        if node not in rs.nodes:
            return
        rs.heartbeat(node, self.now)
        state = rs.view.states[node]
        primary = rs.primary
        if (state is MemberState.DOWN or diverged) and primary not in (None, node) and self.is_up(primary):
            n = rs.nodes[node]
            plan = rs.rejoin(node, self.now)
            self.emit("rejoin", rs=rs_id, node=node, keep=plan.from_lsn, discarded=len(plan.discarded))
            if plan.discarded:
                self.emit("rollback", rs=rs_id, node=node, to=plan.from_lsn)
                for e in plan.discarded:
                    f = dict(rs=rs_id, node=node, lsn=e.lsn, epoch=e.epoch)
                    if isinstance(e.op, KvPut) and isinstance(e.op.value, str) and e.op.value.startswith("w"):
                        f["w"] = e.op.value[1:]
                    self.emit("discard", **f)
            self.diverged.discard(node)
            self.pending_pull.pop(node, None)
            self.believes[node] = (rs.epoch, rs.primary)
            if n.applied_lsn >= rs.nodes[primary].applied_lsn:
                rs.recovering.discard(node)
        if node in rs.recovering and primary is not None:
            if rs.nodes[node].applied_lsn >= rs.nodes[primary].applied_lsn:
                rs.recovering.discard(node)
        self.send(COORD, node, "hb-reply", rs.epoch, rs.primary)

    def _on_hb_reply(self, msg: Message) -> None:
        epoch, primary = msg.body
        if epoch >= self.believes[msg.dst][0]:
            self.believes[msg.dst] = (epoch, primary)

    def _on_pull(self, msg: Message) -> None:
        rs_id, from_lsn = msg.body
        epoch, primary = self.believes[msg.dst]
        node = self.rs[rs_id].nodes[msg.dst]
        if primary != msg.dst:
            self.send(msg.dst, msg.src, "batch", rs_id, None, 0, (), epoch)
            return
        entries = tuple(node.entries_after(from_lsn, self.batch)) if from_lsn <= node.applied_lsn else ()
        self.send(msg.dst, msg.src, "batch", rs_id, from_lsn, node.entry_epoch(from_lsn), entries, epoch)

    def _on_batch(self, msg: Message) -> None:
        rs_id, prev_lsn, prev_epoch, entries, epoch = msg.body
        self.pending_pull.pop(msg.dst, None)
        if prev_lsn is None or epoch < self.believes[msg.dst][0]:
            return
        node = self.rs[rs_id].nodes[msg.dst]
        before = node.applied_lsn
        if node.append(prev_lsn, prev_epoch, list(entries)):
            if node.applied_lsn > before:
                self.emit("append", rs=rs_id, node=msg.dst, **{"from": before + 1}, to=node.applied_lsn,
                          epoch=node.last_epoch())
        elif msg.dst not in self.diverged:
            self.diverged.add(msg.dst)
            self.emit("diverge", rs=rs_id, node=msg.dst, at=prev_lsn)

    def _on_rpull(self, msg: Message) -> None:
        shard, from_lsn = msg.body
        if self.shard_map.members[shard].master != msg.dst:
            return
        records = tuple(self.engines[msg.dst].read_log(from_lsn, 256))
        self.send(msg.dst, msg.src, "rbatch", shard, records)

    def _on_rbatch(self, msg: Message) -> None:
        shard, records = msg.body
        self.pending_pull.pop(msg.dst, None)
        eng = self.engines[msg.dst]
        before = eng.last_lsn
        try:
            eng.apply_replica(records)
        except LsnGap:
            return
        if eng.last_lsn > before:
            self.emit("rapply", shard=shard, node=msg.dst, **{"from": before + 1}, to=eng.last_lsn)

    def _on_txn(self, msg: Message) -> None:
        shard, rid, req = msg.body
        eng = self.engines[msg.dst]
        self.counts[msg.dst] = self.counts.get(msg.dst, 0) + 1
        before = eng.last_lsn
        try:
            execute_relational(eng, req, False)
        except TrinityError as exc:
            self.send(msg.dst, CLIENT, "txn-ack", shard, rid, req, None, exc.code)
            return
        self.emit("rcommit", shard=shard, node=msg.dst, **{"from": before + 1}, to=eng.last_lsn)
        self.send(msg.dst, CLIENT, "txn-ack", shard, rid, req, eng.last_lsn, None)

    def _on_txn_ack(self, msg: Message) -> None:
        shard, rid, req, lsn, code = msg.body
        if code is not None:
            self.emit("reject", kind="oltp", code=code)
            return
        self.emit("ack-txn", shard=shard, id=rid, op=req.operation.value, lsn=lsn)
        if req.operation is Operation.CREATE:
            self.row_ids.append(rid)
            self._row_tenant[rid] = req.tenant_id
        elif req.operation is Operation.DELETE and rid in self._row_tenant:
            self.row_ids.remove(rid)
            del self._row_tenant[rid]

    def _on_write(self, msg: Message) -> None:
        rs_id, wid, op = msg.body
        epoch, primary = self.believes[msg.dst]
        self.counts[msg.dst] = self.counts.get(msg.dst, 0) + 1
        if primary != msg.dst:
            self.send(msg.dst, CLIENT, "write-ack", rs_id, wid, msg.dst, epoch, None)
            return
        entry = self.rs[rs_id].nodes[msg.dst].accept(op, epoch)
        self._accepted(rs_id, msg.dst, epoch, entry.lsn, op, wid)
        self.send(msg.dst, CLIENT, "write-ack", rs_id, wid, msg.dst, epoch, entry.lsn)

    def _on_write_ack(self, msg: Message) -> None:
        rs_id, wid, node, epoch, lsn = msg.body
        if lsn is None:
            self.emit("reject", kind="kv", code="NOT_PRIMARY")
            return
        if wid is not None:
            self.acked[wid] = (rs_id, node, epoch, lsn)
            self.emit("ack-write", w=wid, rs=rs_id, node=node, epoch=epoch, lsn=lsn)

    # -- main loop -----------------------------------------------------------------------------------

    def run(self) -> list[TraceEvent]:
        cmds = self.scenario.commands
        if not cmds:
            return []
        first = cmds[0]
        self.now = first.at
        self.build(first if first.name == "topology" else None)
        for c in cmds:
            self.push(c.at, "cmd", c)
        ends = [c.at for c in cmds if c.name in ("stop", "end")]
        untils = [w.until for w in self.scenario.workloads if w.until is not None]
        end_at = min(ends) if ends else max([c.at for c in cmds] + untils)
        while self._queue and self._queue[0][0] <= end_at:
            self._step()
        self.now = max(self.now, end_at)
        self._drain()
        self._final()
        return self.trace

    def _step(self) -> None:
        at, _, ev = heapq.heappop(self._queue)
        self.now = at
        if ev.kind == "cmd":
            if ev.payload.name not in ("stop", "end", "assert"):
                self.command(ev.payload)
        elif ev.kind == "deliver":
            self.deliver(ev.payload)
        elif ev.kind == "tick":
            self.periodic(ev.payload)
        elif ev.kind == "work":
            self.work(ev.payload)

    def _drain(self) -> None:
        self.stopped = True
        self.emit("drain")
        if self.partitions:
            self.inject(Heal())
        for n in sorted(self.down):
            self.inject(Recover(n))
        for s in sorted(self.pipeline_down):
            self.pipeline_down.discard(s)
            self.emit("cdc-restart", shard=s)
        for s in sorted(self.pipelines):
            if self.pipelines[s].paused:
                self.pipelines[s].paused = False
                self.emit("cdc-resume", shard=s)
        self.armed.clear()
        self.link_drop.clear()
        self.drop = 0.0
        deadline = self.now + MAX_DRAIN_TICKS
        calm = 0
        while self._queue and self.now < deadline:
            at, _, ev = self._queue[0]
            if ev.kind == "tick" and ev.payload == "coord":
                calm = calm + 1 if self._quiescent() else 0
                if calm >= 2:
                    return
            self._step()
        self.emit("no-quiesce")

    def _quiescent(self) -> bool:
        if self.in_flight:
            return False
        for rs_id in sorted(self.rs):
            rs = self.rs[rs_id]
            v = rs.view
            if rs.primary is None or rs.recovering or self.diverged:
                return False
            top = rs.nodes[rs.primary]
            for m in v.members:
                n = rs.nodes[m]
                if v.states[m] is not MemberState.HEALTHY or n.applied_lsn != top.applied_lsn:
                    return False
                if self.believes[m] != (rs.epoch, rs.primary):
                    return False
        for s in self.shard_map.shards:
            m = self.shard_map.members[s]
            tail = self.engines[m.master].last_lsn
            if any(self.engines[sl].last_lsn != tail for sl in m.slaves):
                return False
            p = self.pipelines[s]
            if p.checkpoint.last_applied_lsn != tail or (p.cursor or 0) != tail:
                return False
        return True

    def _final(self) -> None:
        self.emit("quiesce")
        for rs_id in sorted(self.rs):
            rs = self.rs[rs_id]
            if rs.primary is None:
                continue
            present = {e.op.value[1:] for e in rs.nodes[rs.primary].oplog
                       if isinstance(e.op, KvPut) and isinstance(e.op.value, str)}
            for wid in sorted(self.acked):
                r, node, epoch, lsn = self.acked[wid]
                if r == rs_id and str(wid) not in present:
                    self.emit("lost", w=wid, rs=rs_id, node=node, epoch=epoch, lsn=lsn)
        for rs_id in sorted(self.rs):
            rs = self.rs[rs_id]
            for m in rs.view.members:
                n = rs.nodes[m]
                self.emit("digest", rs=rs_id, node=m, digest=n.digest(), lsn=n.applied_lsn)
        mappings = mappings_for(self.dictionary)
        for s in self.shard_map.shards:
            m = self.shard_map.members[s]
            rs = self.rs[self.shard_map.replica_set_of[s]]
            tables = self.engines[m.master].snapshot()
            expected, actual = [], []
            for name in sorted(mappings):
                docs = expected_documents(tables, mappings[name])
                expected += [[name, t, {"_id": d, **doc}] for (t, d), doc in docs.items()]
                if rs.primary is not None and name in rs.nodes[rs.primary].stores.collections:
                    actual += [[name, t, doc] for t, doc in rs.nodes[rs.primary].stores.documents(name)]
            self.emit("cdc", shard=s, rs=rs.id, expected=_digest(sorted(expected, key=_doc_order)),
                      actual=_digest(sorted(actual, key=_doc_order)))
            for node in (m.master, *m.slaves):
                self.emit("rdigest", shard=s, node=node,
                          digest=hashlib.sha256(self.engines[node].snapshot_bytes()).hexdigest()[:16])


def run_scenario(scenario: Scenario | str, seed: int | None = None):
    """Run a scenario; returns (trace, assertion results)."""
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    scenario = scenario.with_seed(seed)
    world = World(scenario)
    trace = world.run()
    return trace, check_invariants(trace, scenario.assertions)


def inject_fault(sim: World, fault) -> None:
    sim.inject(fault)
