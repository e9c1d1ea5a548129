"""LRU cache of OLAP query results, invalidated per entity by applies."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Mapping

from .predicate import canonical_text, parse_predicate

DEFAULT_CAPACITY = 1024


@dataclass(frozen=True)
class CacheKey:
    tenant_id: str
    entity: str
    predicate: str
    engine: str
    shape: str = ""


def make_key(tenant_id: str, entity: str, predicate, engine: str, shape: str = "") -> CacheKey:
    return CacheKey(tenant_id, entity, canonical_text(parse_predicate(predicate)), str(engine), shape)


@dataclass(frozen=True)
class CacheEntry:
    result: Any
    # replica set id -> applied lsn of the member that served it
    as_of: Mapping[str, int] = field(default_factory=dict)
    inserted_at: int = 0


class QueryCache:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._lock = threading.Lock()
        self._entries: OrderedDict[CacheKey, CacheEntry] = OrderedDict()
        self._by_entity: dict[str, set[CacheKey]] = {}
        self._invalidated: dict[str, dict[str, int]] = {}
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.rejected = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def keys(self) -> list[CacheKey]:
        """Least recently used first."""
        with self._lock:
            return list(self._entries)

    def _fresh(self, key: CacheKey, entry: CacheEntry) -> bool:
        marks = self._invalidated.get(key.entity)
        if not marks:
            return True
        return all(entry.as_of.get(rs, -1) >= lsn for rs, lsn in marks.items() if rs in entry.as_of)

    def lookup(self, key: CacheKey) -> CacheEntry | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return entry

    def insert(self, key: CacheKey, entry: CacheEntry) -> bool:
        """Store ``entry``; refused (False) when it was read from a member
        older than an invalidation already seen for its entity."""
        with self._lock:
            if not self._fresh(key, entry):
                self.rejected += 1
                return False
            self._entries[key] = entry
            self._entries.move_to_end(key)
            self._by_entity.setdefault(key.entity, set()).add(key)
            while len(self._entries) > self.capacity:
                old, _ = self._entries.popitem(last=False)
                self._by_entity[old.entity].discard(old)
                self.evictions += 1
            return True

    def invalidate(self, entity: str, source: str | None = None, lsn: int | None = None) -> int:
        with self._lock:
            if source is not None and lsn is not None:
                marks = self._invalidated.setdefault(entity, {})
                marks[source] = max(marks.get(source, 0), lsn)
            keys = self._by_entity.pop(entity, set())
            for k in keys:
                del self._entries[k]
            return len(keys)

    def last_invalidation(self, entity: str) -> dict[str, int]:
        return dict(self._invalidated.get(entity, {}))

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self._by_entity.clear()

    def stats(self) -> dict:
        total = self.hits + self.misses
        return {
            "size": len(self._entries),
            "capacity": self.capacity,
            "hits": self.hits,
            "misses": self.misses,
            "evictions": self.evictions,
            "rejected": self.rejected,
            "hit_rate": (self.hits / total) if total else 0.0,
        }
