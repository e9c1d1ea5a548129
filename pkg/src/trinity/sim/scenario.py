"""Line-oriented scenario files.

Each line is ``<tick> <command> <args...>``; ``#`` starts a comment. A
``seed <n>`` line without a tick sets the generator seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

from ..errors import ScenarioParseError

COMMANDS = {
    "topology": (0, None),
    "workload": (1, None),
    "crash": (1, 1),
    "recover": (1, 1),
    "partition": (1, 1),
    "heal": (0, 0),
    "kill-primary": (1, 1),
    "crash-pipeline": (1, 2),
    "restart-pipeline": (1, 1),
    "pause-pipeline": (1, 1),
    "resume-pipeline": (1, 1),
    "autoscale": (1, 1),
    "delay": (0, None),
    "assert": (1, None),
    "stop": (0, 0),
    "end": (0, 0),
}
WORKLOAD_KINDS = ("oltp", "olap", "kv")
INVARIANTS = ("single-primary", "lsn-gapless", "convergence", "cache-staleness",
              "routing-determinism", "bounded-loss")
HOOKS = ("after_read", "mid_apply", "after_apply", "after_persist")


@dataclass(frozen=True)
class Command:
    at: int
    name: str
    args: tuple[str, ...] = ()
    options: tuple[tuple[str, str], ...] = ()
    line: int = 0

    def option(self, key: str, default=None):
        for k, v in self.options:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class Workload:
    kind: str
    entity: str
    rate: int
    mix: tuple[int, ...]
    start: int
    until: int | None


@dataclass
class Scenario:
    seed: int = 0
    commands: list[Command] = field(default_factory=list)
    assertions: list[str] = field(default_factory=list)

    @property
    def workloads(self) -> list[Workload]:
        return [workload_of(c) for c in self.commands if c.name == "workload"]

    def with_seed(self, seed: int | None) -> "Scenario":
        if seed is None:
            return self
        return Scenario(seed, list(self.commands), list(self.assertions))


_DEFAULT_ENTITY = {"oltp": "orders", "olap": "orders", "kv": "sessions"}
_DEFAULT_MIX = {"oltp": (70, 20, 10), "olap": (80, 20), "kv": (90, 10)}


def workload_of(cmd: Command) -> Workload:
    kind = cmd.args[0]
    entity = cmd.args[1] if len(cmd.args) > 1 else _DEFAULT_ENTITY[kind]
    rate = int(cmd.option("rate", 10))
    mix_text = cmd.option("mix")
    mix = tuple(int(x) for x in mix_text.split("/")) if mix_text else _DEFAULT_MIX[kind]
    until = cmd.option("until")
    return Workload(kind, entity, rate, mix, cmd.at, int(until) if until is not None else None)


def _fail(lineno: int, msg: str):
    raise ScenarioParseError(f"line {lineno}: {msg}", line=lineno)


def _check(cmd: Command) -> None:
    n = cmd.line
    if cmd.name == "workload":
        if cmd.args[0] not in WORKLOAD_KINDS:
            _fail(n, f"workload kind must be one of {', '.join(WORKLOAD_KINDS)}")
        try:
            w = workload_of(cmd)
        except ValueError:
            _fail(n, "rate, mix and until take integers")
        if w.rate <= 0 or w.rate > 1000:
            _fail(n, "rate must lie in 1..1000 per 1000 ticks")
        if not w.mix or sum(w.mix) <= 0 or any(m < 0 for m in w.mix):
            _fail(n, "mix must be non-negative and not all zero")
    elif cmd.name == "autoscale" and cmd.args[0] not in ("on", "off"):
        _fail(n, "autoscale takes on or off")
    elif cmd.name == "crash-pipeline" and len(cmd.args) == 2 and cmd.args[1] not in HOOKS:
        _fail(n, f"crash point must be one of {', '.join(HOOKS)}")
    elif cmd.name == "partition" and "|" not in cmd.args[0]:
        _fail(n, "partition needs groups separated by |")
    elif cmd.name == "assert":
        for a in cmd.args:
            if a != "all" and a not in INVARIANTS:
                _fail(n, f"unknown invariant {a!r}")
    elif cmd.name in ("topology", "delay"):
        for k, v in cmd.options:
            try:
                float(v)
            except ValueError:
                _fail(n, f"{k} takes a number")


def parse_scenario(text: str) -> Scenario:
    sc = Scenario()
    last = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "seed":
            if len(parts) != 2:
                _fail(lineno, "seed takes one integer")
            try:
                sc.seed = int(parts[1], 0)
            except ValueError:
                _fail(lineno, "seed takes one integer")
            continue
        try:
            at = int(parts[0])
        except ValueError:
            _fail(lineno, f"expected a tick, got {parts[0]!r}")
        if at < 0:
            _fail(lineno, "ticks are non-negative")
        if at < last:
            _fail(lineno, "ticks must not decrease")
        last = at
        if len(parts) < 2:
            _fail(lineno, "missing command")
        name = parts[1]
        if name not in COMMANDS:
            _fail(lineno, f"unknown command {name!r}")
        args, opts = [], []
        for p in parts[2:]:
            k, sep, v = p.partition("=")
            if sep:
                opts.append((k, v))
            else:
                args.append(p)
        lo, hi = COMMANDS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            _fail(lineno, f"{name} takes {lo}..{hi if hi is not None else 'n'} arguments")
        cmd = Command(at, name, tuple(args), tuple(opts), lineno)
        _check(cmd)
        if name == "assert":
            sc.assertions.extend(args)
        sc.commands.append(cmd)
    return sc


def bundled_scenarios() -> list[str]:
    return sorted(f.name[:-4] for f in resources.files("trinity.sim").joinpath("scenarios").iterdir()
                  if f.name.endswith(".scn"))


def load_scenario(path: str) -> Scenario:
    """Read a scenario file, or a bundled one by bare name such as ``kill_twice``."""
    if not os.path.exists(path) and path in bundled_scenarios():
        text = resources.files("trinity.sim").joinpath("scenarios").joinpath(f"{path}.scn").read_text(encoding="utf-8")
        return parse_scenario(text)
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())
