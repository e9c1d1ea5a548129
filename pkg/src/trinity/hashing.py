"""FNV-1a 64-bit and highest-random-weight selection.

The compiled ``_hashcore`` extension is used when it was built; otherwise the
pure-Python kernels serve. Set ``TRINITY_PURE_PYTHON=1`` to force the
fallback. Both produce identical results.
"""

from __future__ import annotations

import os

from . import _hashcore_py

if os.environ.get("TRINITY_PURE_PYTHON") == "1":
    _core = _hashcore_py
else:
    try:
        from . import _hashcore as _core  # type: ignore[attr-defined]
    except ImportError:
        _core = _hashcore_py

BACKEND = "compiled" if _core is not _hashcore_py else "python"

fnv1a64 = _core.fnv1a64
hrw_pick = _core.hrw_pick
hrw_assign = _core.hrw_assign


def score(shard_id: str, routing_key: str) -> int:
    return fnv1a64(f"{shard_id}|{routing_key}".encode("utf-8"))
