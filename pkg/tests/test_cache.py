import random
import threading

import pytest
from oracles import LruRef

from trinity.cache import CacheEntry, QueryCache, make_key
from trinity.predicate import Condition, canonical_text, parse_predicate


def key(entity="orders", pred=(), tenant="t1"):
    return make_key(tenant, entity, pred, "DocumentStore")


class TestCanonicalKey:
    def test_order_of_terms_irrelevant(self):
        a = key(pred=[("a", "=", 1), ("b", ">", 2)])
        b = key(pred=[("b", "gt", 2), ("a", "==", 1)])
        assert a == b

    def test_operator_aliases_normalised(self):
        assert canonical_text(parse_predicate([("x", "lte", 3)])) == canonical_text([Condition("x", "<=", 3)])

    def test_different_values_differ(self):
        assert key(pred={"a": 1}) != key(pred={"a": "1"})


class TestLookupInsert:
    def test_empty_is_miss(self):
        c = QueryCache(4)
        assert c.lookup(key()) is None and c.misses == 1

    def test_hit_with_reordered_predicate(self):
        c = QueryCache(4)
        c.insert(key(pred=[("a", "=", 1), ("b", "=", 2)]), CacheEntry(("r",)))
        assert c.lookup(key(pred=[("b", "=", 2), ("a", "=", 1)])).result == ("r",)

    def test_capacity_plus_one_evicts_first(self):
        c = QueryCache(3)
        for i in range(4):
            c.insert(key(pred={"i": i}), CacheEntry((i,)))
        assert c.lookup(key(pred={"i": 0})) is None
        assert c.evictions == 1

    def test_second_insert_wins(self):
        c = QueryCache(3)
        c.insert(key(), CacheEntry((1,)))
        c.insert(key(), CacheEntry((2,)))
        assert c.lookup(key()).result == (2,) and len(c) == 1

    def test_recency_order(self):
        c = QueryCache(2)
        a, b, d = key(pred={"k": "a"}), key(pred={"k": "b"}), key(pred={"k": "c"})
        c.insert(a, CacheEntry(()))
        c.insert(b, CacheEntry(()))
        c.lookup(a)
        c.insert(d, CacheEntry(()))
        assert b not in c and a in c and d in c

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            QueryCache(0)


class TestInvalidate:
    def test_nothing_cached(self):
        assert QueryCache().invalidate("orders") == 0

    def test_selectivity(self):
        c = QueryCache()
        for i in range(3):
            c.insert(key("orders", {"i": i}, tenant=f"t{i}"), CacheEntry(()))
        for i in range(2):
            c.insert(key("users", {"i": i}), CacheEntry(()))
        assert c.invalidate("orders") == 3
        assert len(c) == 2 and all(k.entity == "users" for k in c.keys())

    def test_older_read_refused_after_invalidation(self):
        c = QueryCache()
        c.invalidate("orders", "rs-s0", 10)
        assert not c.insert(key(), CacheEntry((), {"rs-s0": 9}))
        assert c.insert(key(), CacheEntry((), {"rs-s0": 10}))
        assert c.rejected == 1
        assert c.last_invalidation("orders") == {"rs-s0": 10}

    def test_stats(self):
        c = QueryCache(8)
        c.insert(key(), CacheEntry(()))
        c.lookup(key())
        c.lookup(key(pred={"z": 1}))
        s = c.stats()
        assert (s["size"], s["capacity"], s["hits"], s["misses"]) == (1, 8, 1, 1)
        assert s["hit_rate"] == 0.5


class TestModel:
    @pytest.mark.parametrize("seed", range(5))
    def test_lru_membership_matches_reference(self, seed):
        rng = random.Random(seed)
        cap = rng.randint(1, 12)
        c, ref = QueryCache(cap), LruRef(cap)
        entities = ["a", "b", "c"]
        for step in range(2000):
            e = rng.choice(entities)
            k = key(e, {"v": rng.randrange(8)})
            roll = rng.random()
            if roll < 0.45:
                c.insert(k, CacheEntry((step,)))
                ref.put(k, (step,))
            elif roll < 0.9:
                got = c.lookup(k)
                want = ref.get(k)
                assert (None if got is None else got.result) == want
            else:
                assert c.invalidate(e) == ref.drop_where(lambda kk: kk.entity == e)
            assert c.keys() == ref.order

    def test_concurrent_use_keeps_counts_exact(self):
        c = QueryCache(16)
        lookups = [0] * 4

        def worker(n):
            rng = random.Random(n)
            for _ in range(2000):
                k = key(pred={"v": rng.randrange(40)})
                if rng.random() < 0.5:
                    c.insert(k, CacheEntry(()))
                else:
                    c.lookup(k)
                    lookups[n] += 1

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(c) <= 16
        assert c.hits + c.misses == sum(lookups)
