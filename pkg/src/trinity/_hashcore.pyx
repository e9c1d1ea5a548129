# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled rendezvous kernels (same contract as ``_hashcore_py``)."""

from libc.stdint cimport uint64_t

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _feed_bytes(uint64_t h, bytes data):
    cdef const unsigned char* p = data
    cdef Py_ssize_t n = len(data)
    cdef Py_ssize_t i
    for i in range(n):
        h = (h ^ p[i]) * FNV_PRIME
    return h


def fnv1a64(bytes data):
    return _feed_bytes(FNV_OFFSET, data)


def hrw_pick(list shard_ids, bytes key):
    cdef Py_ssize_t i, best = -1
    cdef uint64_t score, best_score = 0
    cdef uint64_t h
    for i in range(len(shard_ids)):
        h = _feed_bytes(FNV_OFFSET, <bytes>shard_ids[i])
        h = (h ^ 0x7C) * FNV_PRIME
        score = _feed_bytes(h, key)
        if best < 0 or score > best_score:
            best = i
            best_score = score
    return best


def hrw_assign(list shard_ids, list keys):
    cdef Py_ssize_t n = len(shard_ids)
    cdef Py_ssize_t i, j, best
    cdef uint64_t score, best_score
    cdef uint64_t[64] seeds_small
    cdef list out = [0] * len(keys)
    if n > 64:
        return [hrw_pick(shard_ids, k) for k in keys]
    for i in range(n):
        seeds_small[i] = _feed_bytes(FNV_OFFSET, <bytes>shard_ids[i] + b"|")
    for j in range(len(keys)):
        best = -1
        best_score = 0
        for i in range(n):
            score = _feed_bytes(seeds_small[i], <bytes>keys[j])
            if best < 0 or score > best_score:
                best = i
                best_score = score
        out[j] = best
    return out
