"""Rendezvous assignment of tenant rows to relational shards.

``routing_key = tenant_id + ":" + primary_key`` and every shard scores
``fnv1a64(shard_id + "|" + routing_key)``; the highest score owns the key,
ties going to the lexicographically smallest shard id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

from . import hashing
from .errors import DuplicateShard, EmptyShardMap, LastShard, UnknownShard


@dataclass(frozen=True)
class ShardMembers:
    master: str
    slaves: tuple[str, ...] = ()


@dataclass(frozen=True)
class ShardMap:
    version: int
    shards: tuple[str, ...]
    members: Mapping[str, ShardMembers]
    replica_set_of: Mapping[str, str]
    _sorted: tuple[bytes, ...] = field(init=False, repr=False, compare=False)
    _sorted_ids: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.shards)) != len(self.shards):
            raise DuplicateShard(",".join(self.shards))
        ordered = sorted(self.shards)
        object.__setattr__(self, "_sorted", tuple(s.encode("utf-8") for s in ordered))
        object.__setattr__(self, "_sorted_ids", tuple(ordered))
        for s in self.shards:
            m = self.members.get(s)
            if m is None or m.master in m.slaves:
                raise ValueError(f"bad membership for shard {s}")
            if s not in self.replica_set_of:
                raise ValueError(f"shard {s} has no replica set")
        if len(set(self.replica_set_of[s] for s in self.shards)) != len(self.shards):
            raise ValueError("replica sets must be one per shard")

    def owner(self, routing_key: str) -> str:
        if not self.shards:
            raise EmptyShardMap()
        idx = hashing.hrw_pick(list(self._sorted), routing_key.encode("utf-8"))
        return self._sorted_ids[idx]

    def owners(self, routing_keys: Iterable[str]) -> list[str]:
        """Bulk form of :meth:`owner`, served by the batch kernel."""
        if not self.shards:
            raise EmptyShardMap()
        ids = self._sorted_ids
        idx = hashing.hrw_assign(list(self._sorted), [k.encode("utf-8") for k in routing_keys])
        return [ids[i] for i in idx]

    def shard_of_replica_set(self, rs_id: str) -> str:
        for s, r in self.replica_set_of.items():
            if r == rs_id:
                return s
        raise UnknownShard(rs_id)


def routing_key(tenant_id: str, primary_key: str) -> str:
    return f"{tenant_id}:{primary_key}"


def shard_for(shard_map: ShardMap, tenant_id: str, primary_key: str) -> str:
    return shard_map.owner(routing_key(tenant_id, primary_key))


def default_members(shard_id: str, slaves: int = 1) -> ShardMembers:
    return ShardMembers(f"{shard_id}-m", tuple(f"{shard_id}-s{i}" for i in range(slaves)))


def make_shard_map(shard_ids: Iterable[str], slaves: int = 1) -> ShardMap:
    ids = tuple(shard_ids)
    if not ids:
        raise EmptyShardMap()
    return ShardMap(
        version=1,
        shards=ids,
        members=MappingProxyType({s: default_members(s, slaves) for s in ids}),
        replica_set_of=MappingProxyType({s: f"rs-{s}" for s in ids}),
    )


@dataclass(frozen=True)
class Move:
    routing_key: str
    from_shard: str
    to_shard: str


@dataclass(frozen=True)
class MigrationPlan:
    moves: tuple[Move, ...] = ()

    def __len__(self):
        return len(self.moves)


def _plan(old: ShardMap, new: ShardMap, keys: list[str]) -> MigrationPlan:
    if not keys:
        return MigrationPlan()
    before = old.owners(keys)
    after = new.owners(keys)
    return MigrationPlan(tuple(
        Move(k, a, b) for k, a, b in zip(keys, before, after) if a != b
    ))


def add_shard(shard_map: ShardMap, new_shard: str, keys: Iterable[str],
              members: ShardMembers | None = None,
              replica_set: str | None = None) -> tuple[ShardMap, MigrationPlan]:
    if new_shard in shard_map.shards:
        raise DuplicateShard(new_shard)
    slaves = len(next(iter(shard_map.members.values())).slaves) if shard_map.members else 1
    new_members = dict(shard_map.members)
    new_members[new_shard] = members or default_members(new_shard, slaves)
    rs_of = dict(shard_map.replica_set_of)
    rs_of[new_shard] = replica_set or f"rs-{new_shard}"
    new = ShardMap(
        shard_map.version + 1,
        shard_map.shards + (new_shard,),
        MappingProxyType(new_members),
        MappingProxyType(rs_of),
    )
    return new, _plan(shard_map, new, sorted(set(keys)))


def remove_shard(shard_map: ShardMap, shard: str,
                 keys: Iterable[str] = ()) -> tuple[ShardMap, MigrationPlan]:
    if shard not in shard_map.shards:
        raise UnknownShard(shard)
    if len(shard_map.shards) < 2:
        raise LastShard(shard)
    new = ShardMap(
        shard_map.version + 1,
        tuple(s for s in shard_map.shards if s != shard),
        MappingProxyType({s: m for s, m in shard_map.members.items() if s != shard}),
        MappingProxyType({s: r for s, r in shard_map.replica_set_of.items() if s != shard}),
    )
    return new, _plan(shard_map, new, sorted(set(keys)))


def replace_members(shard_map: ShardMap, shard: str, members: ShardMembers) -> ShardMap:
    """New map version with one shard's master/slave roster changed."""
    if shard not in shard_map.shards:
        raise UnknownShard(shard)
    new_members = dict(shard_map.members)
    new_members[shard] = members
    return ShardMap(shard_map.version + 1, shard_map.shards,
                    MappingProxyType(new_members), shard_map.replica_set_of)


def describe(shard_map: ShardMap) -> list[str]:
    """One record per line, as printed by ``admin shards``."""
    lines = [f"version={shard_map.version}"]
    for s in shard_map.shards:
        m = shard_map.members[s]
        lines.append(
            f"shard={s} master={m.master} slaves={','.join(m.slaves) or '-'} "
            f"replica_set={shard_map.replica_set_of[s]}"
        )
    return lines
