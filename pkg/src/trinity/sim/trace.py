"""Trace records: one event per line, ``<tick> <kind> k=v ...`` with the
field order fixed by the emitter, so two runs can be compared with diff."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TraceEvent:
    at: int
    kind: str
    fields: tuple[tuple[str, str], ...] = ()

    def get(self, name: str, default: str | None = None) -> str | None:
        for k, v in self.fields:
            if k == name:
                return v
        return default

    def int(self, name: str) -> int:
        return int(self.get(name))

    def __str__(self):
        if not self.fields:
            return f"{self.at} {self.kind}"
        return f"{self.at} {self.kind} " + " ".join(f"{k}={v}" for k, v in self.fields)


def event(at: int, kind: str, /, **fields) -> TraceEvent:
    return TraceEvent(at, kind, tuple((k, _text(v)) for k, v in fields.items()))


def _text(v) -> str:
    s = str(v)
    if not s or any(c.isspace() for c in s):
        raise ValueError(f"trace field values must be nonempty and space-free: {s!r}")
    return s


def parse_line(line: str) -> TraceEvent:
    parts = line.split()
    if len(parts) < 2:
        raise ValueError(f"bad trace line {line!r}")
    fields = []
    for p in parts[2:]:
        k, sep, v = p.partition("=")
        if not sep:
            raise ValueError(f"bad trace field {p!r}")
        fields.append((k, v))
    return TraceEvent(int(parts[0]), parts[1], tuple(fields))


def from_lines(lines) -> list[TraceEvent]:
    return [parse_line(ln) for ln in lines if ln.strip()]


def to_text(trace) -> str:
    return "".join(f"{e}\n" for e in trace)
