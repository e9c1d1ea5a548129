"""Desk-scale benchmarks behind ``trinity bench``.

A workload is written ``kind[:key=value,...]``, for example
``cdc:records=10000,batch=64`` or ``hash:keys=100000,shards=8``.
"""

from __future__ import annotations

import importlib
import time

from .cluster import Cluster
from .data_model import schema_from_doc
from .errors import TrinityError
from .relational.engine import Insert
from .router import Operation, Request, RequestKind

ORDERS = {"entity": "orders", "kind": "Structured",
          "fields": [{"name": "id", "scalar": "Int64"}, {"name": "amount", "scalar": "Int64"}],
          "primary_key": ["id"]}


class BenchSpecError(TrinityError):
    code = "BAD_WORKLOAD"


def parse_workload(text: str) -> tuple[str, dict[str, int]]:
    kind, _, rest = text.strip().partition(":")
    params = {}
    for part in filter(None, rest.split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise BenchSpecError(f"bad workload parameter {part!r}")
        try:
            params[k.strip()] = int(v)
        except ValueError:
            raise BenchSpecError(f"{k} takes an integer") from None
    if kind not in WORKLOADS:
        raise BenchSpecError(f"unknown workload {kind!r}; choose from {', '.join(sorted(WORKLOADS))}")
    return kind, params


def bench_cdc(records: int = 10_000, batch: int = 64, shards: int = 1) -> dict:
    """Commit single-row transactions (two log records each) and run the
    CDC pipeline in step, sampling lag_records before every iteration."""
    c = Cluster(shards=shards, slaves=0, members=1, batch=batch)
    c.apply_schema(schema_from_doc(ORDERS))
    per_step = max(1, batch // 2)
    total_txns = max(1, records // 2)
    max_lag = 0
    started = time.perf_counter()
    next_id = 0
    while next_id < total_txns:
        for _ in range(min(per_step, total_txns - next_id)):
            shard = c.shard_map.owner(f"t1:{next_id}")
            c.master(shard).run("t1", [Insert("orders", {"id": next_id, "amount": next_id % 997})])
            next_id += 1
        for s in c.shard_map.shards:
            max_lag = max(max_lag, c.lag(s).lag_records)
            c.pipelines[s].run_once()
    for s in c.shard_map.shards:
        c.pipelines[s].drain()
    elapsed = time.perf_counter() - started
    visible = 0
    for rs in c.replica_sets.values():
        stores = rs.nodes[rs.primary].stores
        if "orders" in stores.collections:
            visible += len(stores.documents("orders"))
    replicated = sum(c.master(s).last_lsn for s in c.shard_map.shards)
    return {"workload": "cdc", "records": replicated, "documents": visible, "batch": batch,
            "shards": shards, "seconds": round(elapsed, 4), "max_lag_records": max_lag,
            "records_per_second": round(replicated / elapsed, 1) if elapsed else None}


def bench_route(requests: int = 20_000, shards: int = 4, rows: int = 1000) -> dict:
    c = Cluster(shards=shards, slaves=0, members=1)
    c.apply_schema(schema_from_doc(ORDERS))
    for i in range(rows):
        c.dispatch(Request("t1", RequestKind.OLTP, "orders", Operation.CREATE, row={"id": i, "amount": i}))
    started = time.perf_counter()
    for i in range(requests):
        c.dispatch(Request("t1", RequestKind.OLTP, "orders", Operation.RETRIEVE, pk=i % rows))
    elapsed = time.perf_counter() - started
    return {"workload": "route", "requests": requests, "shards": shards, "seconds": round(elapsed, 4),
            "requests_per_second": round(requests / elapsed, 1)}


def bench_hash(keys: int = 100_000, shards: int = 8, repeat: int = 3) -> dict:
    """Rendezvous bulk assignment on each available kernel backend."""
    ids = [f"s{i}".encode() for i in range(shards)]
    ks = [f"t1:{i}".encode() for i in range(keys)]
    out = {"workload": "hash", "keys": keys, "shards": shards, "backends": {}}
    results = {}
    for label, module in (("python", "trinity._hashcore_py"), ("compiled", "trinity._hashcore")):
        try:
            mod = importlib.import_module(module)
        except ImportError:
            out["backends"][label] = None
            continue
        best = float("inf")
        for _ in range(repeat):
            t = time.perf_counter()
            results[label] = mod.hrw_assign(ids, ks)
            best = min(best, time.perf_counter() - t)
        out["backends"][label] = {"seconds": round(best, 5), "keys_per_second": round(keys / best, 1)}
    if len(results) == 2:
        out["identical"] = list(results["python"]) == list(results["compiled"])
        py, cc = out["backends"]["python"], out["backends"]["compiled"]
        out["speedup"] = round(py["seconds"] / cc["seconds"], 2)
    return out


WORKLOADS = {"cdc": bench_cdc, "route": bench_route, "hash": bench_hash}


def run_workload(text: str) -> dict:
    kind, params = parse_workload(text)
    try:
        return WORKLOADS[kind](**params)
    except TypeError as exc:
        raise BenchSpecError(str(exc)) from None
