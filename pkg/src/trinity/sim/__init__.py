"""Deterministic simulator: scenarios, traces and invariant checks."""

from .invariants import InvariantResult, check_invariants
from .scenario import Scenario, load_scenario, parse_scenario
from .trace import TraceEvent, from_lines, to_text
from .world import Crash, Heal, Partition, Recover, World, inject_fault, run_scenario

__all__ = [
    "Crash", "Heal", "InvariantResult", "Partition", "Recover", "Scenario", "TraceEvent", "World",
    "check_invariants", "from_lines", "inject_fault", "load_scenario", "parse_scenario", "run_scenario",
    "to_text",
]
