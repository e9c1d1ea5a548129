"""NDJSON request/response service over TCP.

Each request is one JSON object per line: ``{"id": n, "verb": "...",
"body": {...}}``. Each response echoes the id and carries either
``"ok": true, "body": ...`` or ``"ok": false, "error": {"code", "message"}``.
"""

from __future__ import annotations

import itertools
import json
import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field

from .cluster import Cluster
from .config import Config
from .data_model import Placement, TenantConfig, schema_from_doc
from .errors import (
    CrossShardTransaction,
    MalformedMessage,
    NodeUnavailable,
    TrinityError,
    UnknownVerb,
)
from .relational.engine import Insert, RelationalEngine, Select, TxnHandle, statement_from_doc
from .router import Consistency, Gather, Operation, Request, RequestKind, key_text
from .shard_manager import describe as describe_shards
from .shard_manager import routing_key
from .values import to_jsonable

log = logging.getLogger(__name__)


@dataclass
class OpenTxn:
    tenant_id: str
    shard: str | None = None
    engine: RelationalEngine | None = None
    handle: TxnHandle | None = None


@dataclass
class Session:
    txns: dict[int, OpenTxn] = field(default_factory=dict)


def _need(body: dict, key: str, kind=str):
    if key not in body:
        raise MalformedMessage(f"body needs {key!r}")
    value = body[key]
    if kind is not None and not isinstance(value, kind):
        raise MalformedMessage(f"{key!r} has the wrong type")
    return value


def _gather(body: dict) -> Gather | None:
    if body.get("aggregate"):
        fn, fld = (list(body["aggregate"]) + [None])[:2]
        return Gather("Aggregate", fld, fn)
    if body.get("order_by"):
        return Gather("OrderedMergeBy", body["order_by"])
    return None


class Service:
    """Verb dispatch over an in-process :class:`Cluster`."""

    def __init__(self, config: Config | None = None, cluster: Cluster | None = None):
        self.config = config or Config()
        c = self.config
        self.started = time.monotonic()
        self.cluster = cluster or Cluster(
            shards=c.shards, slaves=c.slaves, members=c.members, data_dir=c.data_dir,
            durability=c.durability, batch=c.cdc_batch, cache_capacity=c.cache_capacity,
            policy=c.policy, timeout=c.timeout_ms, clock=self.now,
        )
        self._txn_ids = itertools.count(1)
        self.verbs = {
            "schema.apply": self._schema_apply,
            "txn.begin": self._txn_begin,
            "txn.exec": self._txn_exec,
            "txn.commit": self._txn_commit,
            "txn.abort": self._txn_abort,
            "query": self._query,
            "kv.put": self._kv_put,
            "kv.get": self._kv_get,
            "kv.delete": self._kv_delete,
            "kv.scan": self._kv_scan,
            "doc.put": self._doc_put,
            "doc.delete": self._doc_delete,
            "graph.node": self._graph_node,
            "graph.edge": self._graph_edge,
            "graph.neighbors": self._graph_neighbors,
            "st.put": self._st_put,
            "st.range": self._st_range,
            "tenant.set": self._tenant_set,
            "admin.shards": lambda s, b: {"text": describe_shards(self.cluster.shard_map)},
            "admin.replsets": lambda s, b: {"text": [rs.describe() for _, rs in sorted(self.cluster.replica_sets.items())]},
            "admin.cache": self._admin_cache,
            "admin.autoscale": lambda s, b: {"text": [self.cluster.autoscaler.describe(self.now())]},
            "admin.lag": self._admin_lag,
            "admin.drain": self._admin_drain,
        }

    def now(self) -> int:
        return int((time.monotonic() - self.started) * 1000)

    # -- protocol ---------------------------------------------------------------------

    def handle_message(self, msg, session: Session | None = None) -> dict:
        session = session if session is not None else Session()
        rid = msg.get("id") if isinstance(msg, dict) else None
        try:
            if not isinstance(msg, dict):
                raise MalformedMessage("message must be a JSON object")
            if not isinstance(rid, int) or isinstance(rid, bool):
                raise MalformedMessage("id must be an integer")
            verb = msg.get("verb")
            if not isinstance(verb, str):
                raise MalformedMessage("verb must be a string")
            body = msg.get("body", {})
            if body is None:
                body = {}
            if not isinstance(body, dict):
                raise MalformedMessage("body must be an object")
            fn = self.verbs.get(verb)
            if fn is None:
                raise UnknownVerb(verb)
            result = fn(session, body)
            return {"id": rid, "ok": True, "body": to_jsonable(result if result is not None else {})}
        except TrinityError as exc:
            return {"id": rid, "ok": False, "error": {"code": exc.code, "message": str(exc)}}
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            return {"id": rid, "ok": False, "error": {"code": MalformedMessage.code, "message": str(exc)}}

    def handle_line(self, line: str, session: Session) -> str:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            resp = {"id": None, "ok": False, "error": {"code": MalformedMessage.code, "message": str(exc)}}
        else:
            resp = self.handle_message(msg, session)
        return json.dumps(resp, separators=(",", ":"))

    def close_session(self, session: Session) -> None:
        for t in list(session.txns.values()):
            if t.handle is not None:
                try:
                    t.engine.abort(t.handle)
                except TrinityError:
                    pass
        session.txns.clear()

    # -- schema ---------------------------------------------------------------------------

    def _schema_apply(self, session, body):
        docs = body.get("schemas")
        if docs is None:
            docs = [_need(body, "schema", dict)]
        schemas = [schema_from_doc(d) for d in docs]
        d = None
        for s in schemas:
            d = self.cluster.apply_schema(s)
        return {"version": d.version if d else self.cluster.dictionary.version,
                "entities": sorted(s.entity for s in schemas)}

    def _tenant_set(self, session, body):
        tenant = _need(body, "tenant")
        overrides = {k: Placement(v) for k, v in (body.get("placement") or {}).items()}
        self.cluster.tenants[tenant] = TenantConfig(tenant, overrides, body.get("endpoint"))
        return {"tenant": tenant}

    # -- transactions -------------------------------------------------------------------------

    def _txn(self, session, body) -> tuple[int, OpenTxn]:
        tid = _need(body, "txn_id", int)
        t = session.txns.get(tid)
        if t is None:
            raise MalformedMessage(f"no open transaction {tid}")
        return tid, t

    def _txn_begin(self, session, body):
        tenant = _need(body, "tenant")
        tid = next(self._txn_ids)
        session.txns[tid] = OpenTxn(tenant)
        return {"txn_id": tid}

    def _shard_of(self, t: OpenTxn, stmt) -> str | None:
        cl = self.cluster
        if isinstance(stmt, Select):
            return None
        schema = cl.dictionary.schema(stmt.entity)
        if isinstance(stmt, Insert):
            pk = {n: stmt.row.get(n) for n in schema.primary_key}
        else:
            pk = stmt.pk
        return cl.shard_map.owner(routing_key(t.tenant_id, key_text(schema, pk)))

    def _txn_exec(self, session, body):
        _, t = self._txn(session, body)
        docs = body.get("statements")
        if docs is None:
            docs = [_need(body, "statement", dict)]
        out = []
        with self.cluster.lock:
            for doc in docs:
                stmt = statement_from_doc(doc)
                shard = self._shard_of(t, stmt)
                if shard is None:
                    shard = t.shard
                    if shard is None:
                        if len(self.cluster.shard_map.shards) > 1:
                            raise CrossShardTransaction("a scan before any keyed statement spans shards")
                        shard = self.cluster.shard_map.shards[0]
                if t.shard is None:
                    t.shard = shard
                    t.engine = self.cluster.master(shard)
                    t.handle = t.engine.begin(t.tenant_id)
                elif shard != t.shard:
                    raise CrossShardTransaction(f"statement targets {shard}, transaction is on {t.shard}")
                out.append(t.engine.execute(t.handle, stmt))
        return {"results": out}

    def _txn_commit(self, session, body):
        tid, t = self._txn(session, body)
        del session.txns[tid]
        if t.handle is None:
            return {"lsn": None, "shard": None}
        with self.cluster.lock:
            if not self.cluster.relational_up.get(t.engine.node_id):
                raise NodeUnavailable(t.engine.node_id)
            lsn = t.engine.commit(t.handle)
        return {"lsn": lsn, "shard": t.shard}

    def _txn_abort(self, session, body):
        tid, t = self._txn(session, body)
        del session.txns[tid]
        if t.handle is not None:
            t.engine.abort(t.handle)
        return {"aborted": tid}

    # -- reads and unstructured writes -----------------------------------------------------------

    def _query(self, session, body):
        kind = RequestKind(body.get("kind", "OLAP"))
        req = Request(
            _need(body, "tenant"), kind, _need(body, "entity"), Operation.QUERY if kind is RequestKind.OLAP
            else Operation.RETRIEVE,
            pk=body.get("pk"), predicate=body.get("predicate"), key=body.get("key"),
            consistency=Consistency(body.get("consistency", "Fresh")), gather=_gather(body),
            row=body.get("params"),
        )
        return {"rows": self.cluster.dispatch(req)}

    def _olap_write(self, body, entity, op, key=None, row=None):
        req = Request(_need(body, "tenant"), RequestKind.OLAP, entity, op, key=key, row=row)
        return self.cluster.dispatch(req)[0]

    def _olap_read(self, body, entity, key=None, row=None):
        req = Request(_need(body, "tenant"), RequestKind.OLAP, entity, Operation.RETRIEVE, key=key, row=row,
                      consistency=Consistency(body.get("consistency", "Fresh")))
        return self.cluster.dispatch(req)

    def _kv_put(self, session, body):
        return self._olap_write(body, _need(body, "ns"), Operation.CREATE, _need(body, "key"),
                                {"value": body.get("value")})

    def _kv_get(self, session, body):
        rows = self._olap_read(body, _need(body, "ns"), key=_need(body, "key"))
        return {"found": bool(rows), "value": rows[0]["value"] if rows else None}

    def _kv_delete(self, session, body):
        return self._olap_write(body, _need(body, "ns"), Operation.DELETE, _need(body, "key"))

    def _kv_scan(self, session, body):
        req = Request(_need(body, "tenant"), RequestKind.OLAP, _need(body, "ns"), Operation.QUERY,
                      row={"prefix": body.get("prefix", "")}, gather=Gather("OrderedMergeBy", "key"),
                      consistency=Consistency(body.get("consistency", "Fresh")))
        return {"items": [[r["key"], r["value"]] for r in self.cluster.dispatch(req)]}

    def _doc_put(self, session, body):
        return self._olap_write(body, _need(body, "collection"), Operation.CREATE, str(_need(body, "id", None)),
                                dict(_need(body, "document", dict)))

    def _doc_delete(self, session, body):
        return self._olap_write(body, _need(body, "collection"), Operation.DELETE, str(_need(body, "id", None)))

    def _graph_node(self, session, body):
        op = Operation.DELETE if body.get("delete") else Operation.CREATE
        return self._olap_write(body, _need(body, "graph"), op, None,
                                {"node": _need(body, "node"), "properties": body.get("properties") or {}})

    def _graph_edge(self, session, body):
        op = Operation.DELETE if body.get("delete") else Operation.CREATE
        return self._olap_write(body, _need(body, "graph"), op, None,
                                {"src": _need(body, "src"), "dst": _need(body, "dst"),
                                 "label": body.get("label", ""), "properties": body.get("properties") or {}})

    def _graph_neighbors(self, session, body):
        rows = self._olap_read(body, _need(body, "graph"),
                               row={"start": _need(body, "start"), "depth": int(body.get("depth", 1))})
        return {"nodes": [[r["node"], r["depth"]] for r in rows]}

    def _st_put(self, session, body):
        row = {"x": _need(body, "x", (int, float)), "y": _need(body, "y", (int, float)),
               "t": _need(body, "t", int), "payload": body.get("payload") or {}}
        return self._olap_write(body, _need(body, "layer"), Operation.CREATE, str(_need(body, "id", None)), row)

    def _st_range(self, session, body):
        req = Request(_need(body, "tenant"), RequestKind.OLAP, _need(body, "layer"), Operation.QUERY,
                      row={"box": list(_need(body, "box", list)), "interval": list(_need(body, "interval", list))},
                      consistency=Consistency(body.get("consistency", "Fresh")))
        rows = self.cluster.dispatch(req)
        return {"points": sorted(rows, key=lambda r: (r["t"], r["id"]))}

    # -- admin ------------------------------------------------------------------------------

    def _admin_cache(self, session, body):
        s = self.cluster.cache.stats()
        return {"text": [" ".join(f"{k}={s[k]}" for k in ("size", "capacity", "hits", "misses",
                                                           "evictions", "rejected"))], "stats": s}

    def _admin_lag(self, session, body):
        lines = []
        for s in self.cluster.shard_map.shards:
            try:
                m = self.cluster.lag(s, self.now())
            except TrinityError as exc:
                lines.append(f"shard={s} error={exc.code}")
                continue
            lines.append(f"shard={s} master_lsn={m.master_lsn} applied_lsn={m.applied_lsn} "
                         f"lag_records={m.lag_records} lag_millis={m.lag_millis}")
        return {"text": lines}

    def _admin_drain(self, session, body):
        self.cluster.drain()
        return self._admin_lag(session, body)

    # -- background work ----------------------------------------------------------------------

    def background(self, stop: threading.Event) -> None:
        """CDC pumping, heartbeats and autoscaling until ``stop`` is set."""
        c = self.config
        next_hb = next_scale = 0
        while not stop.wait(c.cdc_interval_ms / 1000):
            now = self.now()
            try:
                self.cluster.pump()
                if now >= next_hb:
                    self.cluster.tick(now)
                    next_hb = now + c.heartbeat_ms
                if c.autoscale and now >= next_scale:
                    self.cluster.autoscale(now, c.autoscale_interval_ms / 1000)
                    next_scale = now + c.autoscale_interval_ms
            except TrinityError as exc:
                log.debug("background step: %s", exc)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: Service = self.server.service
        session = Session()
        try:
            for raw in self.rfile:
                line = raw.decode("utf-8", errors="replace").strip()
                if not line:
                    continue
                self.wfile.write((service.handle_line(line, session) + "\n").encode())
                self.wfile.flush()
        except (ConnectionError, OSError):
            pass
        finally:
            service.close_session(session)


class Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, service: Service):
        c = service.config
        super().__init__((c.host, c.port), _Handler)
        self.service = service
        self._stop = threading.Event()
        self._bg = threading.Thread(target=service.background, args=(self._stop,), daemon=True)

    def serve(self) -> None:
        self._bg.start()
        try:
            self.serve_forever(poll_interval=0.1)
        finally:
            self._stop.set()

    def server_close(self) -> None:
        self._stop.set()
        super().server_close()
