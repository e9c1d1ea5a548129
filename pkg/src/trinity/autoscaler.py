"""Threshold autoscaling with cooldown.

:func:`evaluate` is pure: the same metrics, policy and tick history always
give the same actions, so a recorded metric trace can be replayed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence


@dataclass(frozen=True)
class ScalingPolicy:
    qps_high: float = 100.0
    qps_low: float = 10.0
    lag_high: int = 1000
    cooldown_ticks: int = 50
    min_secondaries: int = 1
    max_secondaries: int = 5
    max_shards: int = 16

    def __post_init__(self):
        if not 0 <= self.qps_low < self.qps_high:
            raise ValueError("need 0 <= qps_low < qps_high")
        if not 0 <= self.min_secondaries <= self.max_secondaries:
            raise ValueError("need 0 <= min_secondaries <= max_secondaries")
        if self.lag_high < 0 or self.cooldown_ticks < 0 or self.max_shards < 1:
            raise ValueError("lag_high, cooldown_ticks must be >= 0 and max_shards >= 1")


@dataclass(frozen=True)
class Metrics:
    """Window averages. ``set_members`` maps replica set -> member ids (primary
    first); ``set_lag`` maps replica set -> lag_records of the shard feeding it."""

    node_qps: Mapping[str, float] = field(default_factory=dict)
    set_members: Mapping[str, Sequence[str]] = field(default_factory=dict)
    set_lag: Mapping[str, int] = field(default_factory=dict)
    shard_masters: Sequence[str] = ()
    cache_hit_rate: float = 0.0

    def __post_init__(self):
        if any(v < 0 for v in self.node_qps.values()) or any(v < 0 for v in self.set_lag.values()):
            raise ValueError("metrics must be non-negative")
        if not 0.0 <= self.cache_hit_rate <= 1.0:
            raise ValueError("cache hit rate must lie in [0, 1]")


@dataclass(frozen=True)
class ScalingAction:
    kind: str               # AddSecondary | RemoveSecondary | AddShard | None
    target: str | None = None

    def __str__(self):
        return f"{self.kind}({self.target})" if self.target else self.kind


NONE = ScalingAction("None")


def evaluate(metrics: Metrics, policy: ScalingPolicy, last_action_tick: int | None,
             now: int) -> list[ScalingAction]:
    if last_action_tick is not None and now - last_action_tick < policy.cooldown_ticks:
        return [NONE]
    actions = []
    for rs in sorted(metrics.set_members):
        members = list(metrics.set_members[rs])
        secondaries = len(members) - 1
        avg = sum(metrics.node_qps.get(m, 0.0) for m in members) / len(members) if members else 0.0
        lag = metrics.set_lag.get(rs, 0)
        if avg > policy.qps_high or lag > policy.lag_high:
            if secondaries < policy.max_secondaries:
                actions.append(ScalingAction("AddSecondary", rs))
        elif avg < policy.qps_low and secondaries > policy.min_secondaries:
            actions.append(ScalingAction("RemoveSecondary", rs))
    masters = list(metrics.shard_masters)
    total = sum(metrics.node_qps.get(m, 0.0) for m in masters)
    if masters and total > policy.qps_high and len(masters) < policy.max_shards:
        actions.append(ScalingAction("AddShard"))
    return actions or [NONE]


class Autoscaler:
    """Stateful wrapper remembering the last acting tick."""

    def __init__(self, policy: ScalingPolicy | None = None):
        self.policy = policy or ScalingPolicy()
        self.last_action_tick: int | None = None
        self.last_decision: list[ScalingAction] = [NONE]
        self.last_evaluated: int | None = None

    def step(self, metrics: Metrics, now: int) -> list[ScalingAction]:
        actions = evaluate(metrics, self.policy, self.last_action_tick, now)
        if actions != [NONE]:
            self.last_action_tick = now
        self.last_decision = actions
        self.last_evaluated = now
        return actions

    def describe(self, now: int | None = None) -> str:
        remaining = 0
        if self.last_action_tick is not None and now is not None:
            remaining = max(0, self.policy.cooldown_ticks - (now - self.last_action_tick))
        decision = ",".join(str(a) for a in self.last_decision)
        return (f"last_decision={decision} last_action_tick={self.last_action_tick} "
                f"cooldown_remaining={remaining}")
