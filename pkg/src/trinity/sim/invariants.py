"""Global invariant suite evaluated over a finished trace.

Every check reads only trace events, never live state, so a stored trace
can be re-checked (or a hand-forged one used to exercise a check).
"""

from __future__ import annotations

from dataclasses import dataclass

from .scenario import INVARIANTS


@dataclass(frozen=True)
class InvariantResult:
    name: str
    ok: bool
    index: int | None = None
    detail: str = ""

    def __str__(self):
        if self.ok:
            return f"{self.name}: pass"
        return f"{self.name}: FAIL at event {self.index}: {self.detail}"


def _fail(name, i, detail):
    return InvariantResult(name, False, i, detail)


def check_single_primary(trace) -> InvariantResult:
    """At most one primary per (set, epoch); epochs strictly increase; every
    accepted write came from the primary of the epoch it was stamped with."""
    name = "single-primary"
    owner: dict[tuple[str, int], str] = {}
    latest: dict[str, int] = {}
    for i, e in enumerate(trace):
        if e.kind in ("primary", "promote"):
            rs, epoch, node = e.get("rs"), e.int("epoch"), e.get("node")
            if epoch <= latest.get(rs, 0):
                return _fail(name, i, f"{rs} epoch {epoch} does not advance past {latest[rs]}")
            prev = owner.get((rs, epoch))
            if prev is not None and prev != node:
                return _fail(name, i, f"{rs} epoch {epoch} has primaries {prev} and {node}")
            owner[(rs, epoch)] = node
            latest[rs] = epoch
            if e.kind == "promote" and e.int("applied") != e.int("max"):
                return _fail(name, i, f"{node} promoted with lsn {e.get('applied')} < {e.get('max')}")
        elif e.kind == "accept":
            key = (e.get("rs"), e.int("epoch"))
            if owner.get(key) != e.get("node"):
                return _fail(name, i, f"{e.get('node')} accepted at epoch {key[1]} without being its primary")
    return InvariantResult(name, True)


def check_lsn_gapless(trace) -> InvariantResult:
    name = "lsn-gapless"
    last: dict[tuple, int] = {}
    for i, e in enumerate(trace):
        k = e.kind
        if k == "accept":
            key = ("n", e.get("rs"), e.get("node"))
            want = last.get(key, 0) + 1
            if e.int("lsn") != want:
                return _fail(name, i, f"{key[2]} accepted lsn {e.get('lsn')}, expected {want}")
            last[key] = want
        elif k in ("append", "rcommit", "rapply"):
            key = ("n", e.get("rs"), e.get("node")) if k == "append" else ("r", e.get("shard"), e.get("node"))
            lo, hi = e.int("from"), e.int("to")
            if lo != last.get(key, 0) + 1 or hi < lo:
                return _fail(name, i, f"{key[2]} applied {lo}..{hi} after {last.get(key, 0)}")
            last[key] = hi
        elif k == "rollback":
            key = ("n", e.get("rs"), e.get("node"))
            to = e.int("to")
            if to > last.get(key, 0):
                return _fail(name, i, f"{key[2]} rolled forward to {to}")
            last[key] = to
        elif k == "remove-member":
            last.pop(("n", e.get("rs"), e.get("node")), None)
    return InvariantResult(name, True)


def check_convergence(trace) -> InvariantResult:
    """After quiescence: members of a set hold identical stores, shard
    slaves equal their master, and documents equal the mapped tables."""
    name = "convergence"
    seen: dict[tuple, tuple[str, str]] = {}
    for i, e in enumerate(trace):
        if e.kind == "digest":
            key = ("rs", e.get("rs"))
        elif e.kind == "rdigest":
            key = ("shard", e.get("shard"))
        elif e.kind == "cdc":
            if e.get("expected") != e.get("actual"):
                return _fail(name, i, f"{e.get('rs')} documents differ from shard {e.get('shard')} tables")
            continue
        else:
            continue
        prev = seen.get(key)
        if prev is None:
            seen[key] = (e.get("node"), e.get("digest"))
        elif prev[1] != e.get("digest"):
            return _fail(name, i, f"{key[1]}: {e.get('node')} differs from {prev[0]}")
    return InvariantResult(name, True)


def _as_of(text: str) -> dict[str, int]:
    if text in (None, "-"):
        return {}
    out = {}
    for part in text.split(","):
        rs, _, lsn = part.rpartition(":")
        out[rs] = int(lsn)
    return out


def check_cache_staleness(trace) -> InvariantResult:
    name = "cache-staleness"
    inval: dict[tuple[str, str], int] = {}
    for i, e in enumerate(trace):
        if e.kind == "invalidate":
            key = (e.get("entity"), e.get("rs"))
            inval[key] = max(inval.get(key, 0), e.int("lsn"))
        elif e.kind == "cache-hit":
            entity = e.get("entity")
            as_of = _as_of(e.get("as_of"))
            for (ent, rs), lsn in sorted(inval.items()):
                if ent == entity and as_of.get(rs, 0) < lsn:
                    return _fail(name, i, f"hit on {entity} as of {rs}:{as_of.get(rs, 0)} predates invalidation at {lsn}")
    return InvariantResult(name, True)


def check_routing_determinism(trace) -> InvariantResult:
    name = "routing-determinism"
    seen: dict[tuple, str] = {}
    for i, e in enumerate(trace):
        if e.kind != "route":
            continue
        key = (e.get("tenant"), e.get("entity"), e.get("key"), e.get("map"))
        group = e.get("group")
        prev = seen.setdefault(key, group)
        if prev != group:
            return _fail(name, i, f"key {key[2]} went to {group}, earlier to {prev}")
    return InvariantResult(name, True)


def check_bounded_loss(trace) -> InvariantResult:
    """A lost acknowledged write must have been accepted by a primary that
    was deposed afterwards, i.e. lost to asynchronous replication."""
    name = "bounded-loss"
    accepted: dict[str, tuple[int, str, str, int]] = {}
    deposed: list[tuple[int, str, str, int]] = []
    for i, e in enumerate(trace):
        if e.kind == "accept" and e.get("w") is not None:
            accepted[e.get("w")] = (i, e.get("rs"), e.get("node"), e.int("epoch"))
        elif e.kind == "promote":
            deposed.append((i, e.get("rs"), e.get("old"), e.int("epoch")))
        elif e.kind == "ack-write":
            a = accepted.get(e.get("w"))
            if a is None or (a[1], a[2], a[3]) != (e.get("rs"), e.get("node"), e.int("epoch")):
                return _fail(name, i, f"write {e.get('w')} acknowledged without a matching accept")
        elif e.kind == "lost":
            a = accepted.get(e.get("w"))
            if a is None:
                return _fail(name, i, f"lost write {e.get('w')} was never accepted")
            at, rs, node, epoch = a
            if not any(j > at and r == rs and old == node and ep > epoch for j, r, old, ep in deposed):
                return _fail(name, i, f"write {e.get('w')} lost though {node} was never deposed")
    return InvariantResult(name, True)


CHECKS = {
    "single-primary": check_single_primary,
    "lsn-gapless": check_lsn_gapless,
    "convergence": check_convergence,
    "cache-staleness": check_cache_staleness,
    "routing-determinism": check_routing_determinism,
    "bounded-loss": check_bounded_loss,
}


def check_invariants(trace, names=None) -> dict[str, InvariantResult]:
    wanted = INVARIANTS if not names or "all" in names else tuple(dict.fromkeys(names))
    return {n: CHECKS[n](trace) for n in wanted}
