"""Conjunctive field predicates and the per-node query evaluator.

A predicate is a tuple of :class:`Condition`; an empty tuple matches every
row. Both the relational scan and every NoSQL store use :func:`run_query`,
so a partial result computed on any node has the same shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .errors import TypeMismatch
from .values import to_jsonable

_OP_ALIASES = {
    "=": "=", "==": "=", "eq": "=",
    "<": "<", "lt": "<",
    ">": ">", "gt": ">",
    "<=": "<=", "le": "<=", "lte": "<=",
    ">=": ">=", "ge": ">=", "gte": ">=",
    "between": "between", "range": "between",
}

AGGREGATES = ("count", "sum", "min", "max")


@dataclass(frozen=True)
class Condition:
    field: str
    op: str
    value: Any
    high: Any = None

    def __post_init__(self):
        op = _OP_ALIASES.get(self.op)
        if op is None:
            raise TypeMismatch(f"unknown operator {self.op!r}")
        object.__setattr__(self, "op", op)

    def test(self, row: dict) -> bool:
        v = row.get(self.field)
        if v is None:
            return self.op == "=" and self.value is None
        try:
            if self.op == "=":
                return v == self.value
            if self.op == "<":
                return v < self.value
            if self.op == ">":
                return v > self.value
            if self.op == "<=":
                return v <= self.value
            if self.op == ">=":
                return v >= self.value
            return self.value <= v <= self.high
        except TypeError:
            return False

    def canonical(self) -> str:
        if self.op == "between":
            bounds = json.dumps([to_jsonable(self.value), to_jsonable(self.high)], sort_keys=True)
            return f"{self.field} between {bounds}"
        return f"{self.field} {self.op} {json.dumps(to_jsonable(self.value), sort_keys=True)}"


Predicate = tuple  # tuple[Condition, ...]


def parse_predicate(raw) -> tuple[Condition, ...]:
    """Accept ``None``, a ``{field: value}`` equality mapping, a list of
    ``[field, op, value]`` / ``[field, "between", lo, hi]`` triples, or
    already-built conditions."""
    if raw is None:
        return ()
    if isinstance(raw, dict):
        return tuple(Condition(k, "=", v) for k, v in raw.items())
    out = []
    for item in raw:
        if isinstance(item, Condition):
            out.append(item)
        elif isinstance(item, dict):
            out.append(Condition(item["field"], item["op"], item.get("value"), item.get("high")))
        else:
            item = list(item)
            if len(item) == 4:
                out.append(Condition(item[0], item[1], item[2], item[3]))
            elif len(item) == 3:
                out.append(Condition(item[0], item[1], item[2]))
            else:
                raise TypeMismatch(f"bad predicate term {item!r}")
    return tuple(out)


def matches(row: dict, predicate: Iterable[Condition]) -> bool:
    return all(c.test(row) for c in predicate)


def canonical_text(predicate: Iterable[Condition]) -> str:
    """Order-independent text form; logically identical conjunctions agree."""
    return " AND ".join(sorted(c.canonical() for c in predicate))


def sort_key(field: str):
    """Ascending, rows lacking the field first."""

    def key(row):
        v = row.get(field)
        return (0,) if v is None else (1, v)

    return key


def aggregate_rows(rows: Sequence[dict], fn: str, field: str | None):
    if fn == "count":
        return len(rows)
    vals = [r[field] for r in rows if r.get(field) is not None]
    if fn == "sum":
        return sum(vals) if vals else 0
    if fn == "min":
        return min(vals) if vals else None
    if fn == "max":
        return max(vals) if vals else None
    raise TypeMismatch(f"unknown aggregate {fn!r}")


def run_query(rows: Iterable[dict], predicate=(), order_by: str | None = None,
              aggregate: tuple[str, str | None] | None = None) -> list[dict]:
    selected = [r for r in rows if matches(r, predicate)]
    if aggregate is not None:
        fn, field = aggregate
        return [{fn: aggregate_rows(selected, fn, field)}]
    if order_by is not None:
        selected.sort(key=sort_key(order_by))
    return selected
