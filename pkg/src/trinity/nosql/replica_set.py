"""Replica sets: one primary per epoch, async oplog streaming, promotion.

The membership view (:class:`ReplicaSetView`) is a value; :func:`promote`
and :func:`heartbeat_tick` are pure functions over it. :class:`ReplicaSet`
wires views to live :class:`NoSqlNode` objects for in-process use; the
simulator drives the same nodes through its own message layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

from ..errors import (
    NodeUnavailable,
    NoEligibleSecondary,
    NoPrimary,
    NotPrimary,
    StaleEpoch,
    TrinityError,
    UnknownNode,
)
from ..predicate import parse_predicate, run_query
from .engines import NodeStores

HEARTBEAT_INTERVAL = 100
FAILURE_TIMEOUT = 500


class MemberState(str, Enum):
    HEALTHY = "Healthy"
    SUSPECTED = "Suspected"
    DOWN = "Down"


@dataclass(frozen=True)
class OplogEntry:
    lsn: int
    epoch: int
    op: object


@dataclass(frozen=True)
class ReplicaSetView:
    id: str
    members: tuple[str, ...]
    primary: str | None
    epoch: int
    states: Mapping[str, MemberState]
    applied: Mapping[str, int]

    def secondaries(self) -> list[str]:
        return [m for m in self.members if m != self.primary]

    def healthy(self, node: str) -> bool:
        return self.states.get(node) is MemberState.HEALTHY

    def healthy_secondaries(self) -> list[str]:
        return [m for m in self.secondaries() if self.healthy(m)]

    def with_applied(self, applied: Mapping[str, int]) -> ReplicaSetView:
        return replace(self, applied=MappingProxyType(dict(applied)))


def initial_view(rs_id: str, members: Iterable[str]) -> ReplicaSetView:
    members = tuple(members)
    if not members:
        raise ValueError("a replica set needs at least one member")
    return ReplicaSetView(
        rs_id, members, members[0], 1,
        MappingProxyType({m: MemberState.HEALTHY for m in members}),
        MappingProxyType({m: 0 for m in members}),
    )


def choose_successor(view: ReplicaSetView) -> str:
    candidates = view.healthy_secondaries()
    if not candidates:
        raise NoEligibleSecondary(view.id)
    return min(candidates, key=lambda m: (-view.applied.get(m, 0), m))


def promote(view: ReplicaSetView) -> ReplicaSetView:
    """Hand the primary role to the most caught-up healthy secondary.

    Ties on applied lsn go to the smallest node id. The deposed primary is
    marked Down and must rejoin before it serves again.
    """
    if view.primary is not None and view.healthy(view.primary):
        raise TrinityError(f"{view.id}: primary {view.primary} is healthy")
    successor = choose_successor(view)
    states = dict(view.states)
    if view.primary is not None:
        states[view.primary] = MemberState.DOWN
    return replace(view, primary=successor, epoch=view.epoch + 1, states=MappingProxyType(states))


@dataclass
class FailureDetector:
    timeout: int = FAILURE_TIMEOUT
    last_seen: dict = field(default_factory=dict)

    def heartbeat(self, node: str, now: int) -> None:
        if now >= self.last_seen.get(node, now):
            self.last_seen[node] = now

    def silent(self, node: str, now: int) -> bool:
        seen = self.last_seen.get(node)
        return seen is None or now - seen > self.timeout


def heartbeat_tick(view: ReplicaSetView, detector: FailureDetector, now: int,
                   hold: Iterable[str] = ()) -> ReplicaSetView:
    """Silent members become Suspected; Suspected members heard from again
    become Healthy unless held (still catching up). Down stays Down."""
    hold = set(hold)
    states = dict(view.states)
    for m in view.members:
        s = states[m]
        if s is MemberState.DOWN:
            continue
        if detector.silent(m, now):
            states[m] = MemberState.SUSPECTED
        elif s is MemberState.SUSPECTED and m not in hold:
            states[m] = MemberState.HEALTHY
    if states == dict(view.states):
        return view
    return replace(view, states=MappingProxyType(states))


class NoSqlNode:
    def __init__(self, node_id: str):
        self.node_id = node_id
        self.stores = NodeStores()
        self.oplog: list[OplogEntry] = []
        self.up = True
        self.epoch = 1

    @property
    def applied_lsn(self) -> int:
        return len(self.oplog)

    def last_epoch(self) -> int:
        return self.oplog[-1].epoch if self.oplog else 0

    def accept(self, op, epoch: int) -> OplogEntry | None:
        """Primary-side apply; ``None`` when the op is an idempotent repeat."""
        if self.stores.is_duplicate(op):
            return None
        entry = OplogEntry(self.applied_lsn + 1, epoch, op)
        self.stores.apply(op)
        self.oplog.append(entry)
        return entry

    def entries_after(self, lsn: int, limit: int | None = None) -> list[OplogEntry]:
        end = None if limit is None else lsn + limit
        return self.oplog[lsn:end]

    def entry_epoch(self, lsn: int) -> int:
        return self.oplog[lsn - 1].epoch if 0 < lsn <= len(self.oplog) else 0

    def append(self, prev_lsn: int, prev_epoch: int, entries: list[OplogEntry]) -> bool:
        """Secondary-side apply of a streamed batch. Returns False when the
        batch does not extend this node's log (divergence or gap)."""
        if prev_lsn != self.applied_lsn or self.entry_epoch(prev_lsn) != prev_epoch:
            if prev_lsn < self.applied_lsn and self.entry_epoch(prev_lsn) == prev_epoch:
                # overlap from a re-sent batch; keep only the unseen tail
                skip = self.applied_lsn - prev_lsn
                for mine, theirs in zip(self.oplog[prev_lsn:], entries[:skip]):
                    if (mine.lsn, mine.epoch) != (theirs.lsn, theirs.epoch):
                        return False
                entries = entries[skip:]
            else:
                return False
        for e in entries:
            self.stores.apply(e.op)
            self.oplog.append(e)
        return True

    def rollback_to(self, lsn: int) -> list[OplogEntry]:
        """Drop entries after ``lsn`` and rebuild the stores from the prefix."""
        if lsn >= self.applied_lsn:
            return []
        discarded = self.oplog[lsn:]
        kept = self.oplog[:lsn]
        self.stores = NodeStores()
        self.oplog = []
        for e in kept:
            self.stores.apply(e.op)
            self.oplog.append(e)
        return discarded

    def digest(self) -> str:
        return self.stores.digest()


def common_prefix(a: NoSqlNode, b: NoSqlNode) -> int:
    """Largest lsn at which both logs hold the same (lsn, epoch) entry."""
    k = min(a.applied_lsn, b.applied_lsn)
    while k > 0 and a.oplog[k - 1].epoch != b.oplog[k - 1].epoch:
        k -= 1
    return k


@dataclass(frozen=True)
class CatchUpPlan:
    node: str
    from_lsn: int
    to_lsn: int
    discarded: tuple = ()

    def __len__(self):
        return self.to_lsn - self.from_lsn


class ReplicaSet:
    """In-process replica set with a single membership authority (itself)."""

    def __init__(self, rs_id: str, member_ids: Iterable[str], timeout: int = FAILURE_TIMEOUT):
        member_ids = list(member_ids)
        self.nodes = {m: NoSqlNode(m) for m in member_ids}
        self._view = initial_view(rs_id, member_ids)
        self.detector = FailureDetector(timeout)
        self.recovering: set[str] = set()
        self.promotions: list[tuple[int, str]] = []
        self.listeners: list[Callable] = []

    @property
    def id(self) -> str:
        return self._view.id

    @property
    def view(self) -> ReplicaSetView:
        return self._view.with_applied({m: n.applied_lsn for m, n in self.nodes.items()})

    @property
    def epoch(self) -> int:
        return self._view.epoch

    @property
    def primary(self) -> str | None:
        return self._view.primary

    def node(self, node_id: str) -> NoSqlNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    # -- writes ---------------------------------------------------------------------

    def apply(self, op, epoch: int | None = None, node: str | None = None) -> int:
        view = self._view
        if epoch is not None and epoch < view.epoch:
            raise StaleEpoch(f"{view.id}: epoch {epoch} < {view.epoch}")
        if view.primary is None:
            raise NoPrimary(view.id)
        target = node or view.primary
        if target != view.primary:
            raise NotPrimary(f"{target} is not primary of {view.id}", current_epoch=view.epoch)
        primary = self.nodes[target]
        if not primary.up:
            raise NodeUnavailable(target)
        entry = primary.accept(op, view.epoch)
        if entry is not None:
            for fn in self.listeners:
                fn(view.id, op, entry.lsn)
        return primary.applied_lsn

    def replicate(self, max_entries: int | None = None) -> int:
        """Stream the primary's oplog to every reachable secondary."""
        view = self._view
        if view.primary is None or not self.nodes[view.primary].up:
            return 0
        primary = self.nodes[view.primary]
        shipped = 0
        for m in view.secondaries():
            n = self.nodes[m]
            if not n.up or view.states[m] is MemberState.DOWN:
                continue
            batch = primary.entries_after(n.applied_lsn, max_entries)
            if batch and n.append(n.applied_lsn, primary.entry_epoch(n.applied_lsn), batch):
                shipped += len(batch)
            n.epoch = view.epoch
            if m in self.recovering and n.applied_lsn >= primary.applied_lsn:
                self.recovering.discard(m)
        return shipped

    # -- membership -------------------------------------------------------------------

    def heartbeat(self, node: str, now: int) -> None:
        if self.nodes[node].up:
            self.detector.heartbeat(node, now)

    def tick(self, now: int) -> ReplicaSetView:
        """Heartbeat evaluation, then promotion if the primary is suspect."""
        self._view = heartbeat_tick(self.view, self.detector, now, self.recovering)
        p = self._view.primary
        if p is not None and not self._view.healthy(p) and self._view.healthy_secondaries():
            self.promote(now)
        return self._view

    def promote(self, now: int = 0) -> ReplicaSetView:
        self._view = promote(self.view)
        self.nodes[self._view.primary].epoch = self._view.epoch
        self.promotions.append((now, self._view.primary))
        return self._view

    def crash(self, node: str) -> None:
        self.node(node).up = False

    def restart(self, node: str) -> None:
        self.node(node).up = True

    def rejoin(self, node: str, now: int | None = None) -> CatchUpPlan:
        """Bring a Down/Suspected member back: discard any suffix it wrote
        under a fenced epoch, then let streaming catch it up."""
        view = self._view
        n = self.node(node)
        if view.primary is None or view.primary == node:
            raise NoPrimary(view.id)
        primary = self.nodes[view.primary]
        keep = common_prefix(n, primary)
        discarded = tuple(n.rollback_to(keep))
        n.up = True
        n.epoch = view.epoch
        plan = CatchUpPlan(node, keep, primary.applied_lsn, discarded)
        states = dict(view.states)
        if len(plan) == 0:
            states[node] = MemberState.HEALTHY
            self.recovering.discard(node)
        else:
            states[node] = MemberState.SUSPECTED
            self.recovering.add(node)
        if now is not None:
            self.detector.heartbeat(node, now)
        self._view = replace(view, states=MappingProxyType(states))
        return plan

    def add_member(self, node_id: str, now: int | None = None) -> CatchUpPlan:
        if node_id in self.nodes:
            raise TrinityError(f"{node_id} already in {self.id}")
        self.nodes[node_id] = NoSqlNode(node_id)
        view = self._view
        states = dict(view.states)
        states[node_id] = MemberState.DOWN
        self._view = replace(view, members=view.members + (node_id,), states=MappingProxyType(states))
        return self.rejoin(node_id, now)

    def remove_member(self, node_id: str) -> None:
        view = self._view
        if node_id == view.primary:
            raise TrinityError("cannot remove the primary")
        self.node(node_id)
        del self.nodes[node_id]
        self.recovering.discard(node_id)
        states = {m: s for m, s in view.states.items() if m != node_id}
        self._view = replace(view, members=tuple(m for m in view.members if m != node_id),
                             states=MappingProxyType(states))

    # -- reads --------------------------------------------------------------------

    def member(self, node_id: str | None = None) -> NoSqlNode:
        n = self.node(node_id or self._view.primary)
        if not n.up:
            raise NodeUnavailable(n.node_id)
        return n

    def query_documents(self, collection: str, predicate=(), member: str | None = None,
                        tenant: str | None = None, order_by=None, aggregate=None):
        """Matching documents plus the serving member's applied lsn."""
        n = self.member(member)
        rows = [doc for _, doc in n.stores.documents(collection, tenant)]
        return run_query(rows, parse_predicate(predicate), order_by, aggregate), n.applied_lsn

    def describe(self) -> str:
        v = self.view
        members = " ".join(
            f"{m}:{v.states[m].value}:{v.applied[m]}{'*' if m == v.primary else ''}" for m in v.members
        )
        return f"replica_set={v.id} epoch={v.epoch} primary={v.primary} members={members}"
