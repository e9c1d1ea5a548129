"""Seeded random fault schedules for campaign runs."""

from __future__ import annotations

import random

from .scenario import HOOKS


def random_scenario(seed: int, duration: int = 4000, shards: int = 2) -> str:
    rng = random.Random(seed)
    members = rng.choice((3, 3, 4))
    lines = [
        f"seed {seed}",
        f"0 topology shards={shards} slaves=1 members={members}",
        f"0 workload oltp orders rate={rng.choice((40, 60, 80))} mix=60/25/15",
        f"0 workload kv sessions rate={rng.choice((30, 50))} mix=85/15",
        f"0 workload olap orders rate={rng.choice((10, 20))} mix=80/20",
        f"0 delay max={rng.randint(1, 8)} drop={rng.choice((0, 0.01, 0.03))}",
    ]
    rs_ids = [f"rs-s{i}" for i in range(shards)]
    nosql = [f"{r}-n{i}" for r in rs_ids for i in range(members)]
    relational = [f"s{i}-{x}" for i in range(shards) for x in ("m", "s0")]
    events = []
    t = rng.randint(200, 600)
    while t < duration - 300:
        kind = rng.choice(("kill", "crash", "partition", "pipeline", "pipeline-hook", "pause", "delay"))
        back = min(duration - 1, t + rng.randint(100, 1500))
        if kind == "kill":
            rs = rng.choice(rs_ids)
            events.append((t, f"kill-primary {rs}"))
        elif kind == "crash":
            node = rng.choice(nosql + relational)
            events.append((t, f"crash {node}"))
            events.append((back, f"recover {node}"))
        elif kind == "partition":
            node = rng.choice(nosql + relational + ["coord"])
            events.append((t, f"partition {node}|*"))
            events.append((back, "heal"))
        elif kind == "pipeline":
            s = rng.randrange(shards)
            events.append((t, f"crash-pipeline s{s}"))
            events.append((back, f"restart-pipeline s{s}"))
        elif kind == "pipeline-hook":
            events.append((t, f"crash-pipeline s{rng.randrange(shards)} {rng.choice(HOOKS)}"))
        elif kind == "pause":
            s = rng.randrange(shards)
            events.append((t, f"pause-pipeline s{s}"))
            events.append((back, f"resume-pipeline s{s}"))
        else:
            events.append((t, f"delay max={rng.randint(1, 20)} drop={rng.choice((0, 0.05, 0.1))}"))
        t += rng.randint(150, 700)
    events.sort(key=lambda e: e[0])
    lines += [f"{at} {text}" for at, text in events]
    lines += [f"{duration} stop", f"{duration} assert all"]
    return "\n".join(lines) + "\n"
