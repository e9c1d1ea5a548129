"""Pure-Python rendezvous kernels; the reference the compiled core must match."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def _suffix_hash(seed: int, data: bytes) -> int:
    h = seed
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def hrw_pick(shard_ids: list[bytes], key: bytes) -> int:
    """Index of the winning shard. ``shard_ids`` must be sorted ascending so
    the strict comparison keeps the lexicographically smallest on ties."""
    best = -1
    best_score = -1
    tail = b"|" + key
    for i, sid in enumerate(shard_ids):
        score = _suffix_hash(fnv1a64(sid), tail)
        if score > best_score:
            best, best_score = i, score
    return best


def hrw_assign(shard_ids: list[bytes], keys: list[bytes]) -> list[int]:
    prefixes = [fnv1a64(sid + b"|") for sid in shard_ids]
    out = []
    for key in keys:
        best = -1
        best_score = -1
        for i, seed in enumerate(prefixes):
            score = _suffix_hash(seed, key)
            if score > best_score:
                best, best_score = i, score
        out.append(best)
    return out
