"""Deterministic scripted agent over the synthetic tool tasks.

The agent is intentionally dumb: without memory it probes every decoy key
before the gold one, so an unaided episode always takes exactly
``len(tool_table)`` steps (the worst-case exploration script). A memory hint
that names the family's key lets it answer in one step. This makes the value
of a memory architecture directly measurable in the delay dimension.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from hashlib import blake2b
from random import Random

from .carriers import MemoryResponse, TrajectoryStep
from .tasks import TaskSpec
from .text import keys_in

_LOOKUP_ACTION_RE = re.compile(r"lookup\(([a-z0-9_]+)\)")


@dataclass(frozen=True)
class SimAgent:
    agent_id: str = "sim"
    seed: int = 0
    max_memory_items: int = 8


def exploration_order(task: TaskSpec, seed: int) -> list[str]:
    """Scripted probe order: decoys shuffled by a task-scoped seed, gold last."""
    gold = task.gold_key()
    decoys = sorted(k for k in task.tool_table if k != gold)
    digest = blake2b(f"{task.task_id}|{seed}".encode("utf-8"), digest_size=8).digest()
    Random(int.from_bytes(digest, "little")).shuffle(decoys)
    return decoys + [gold]


def probed_keys(history: tuple[TrajectoryStep, ...] | list[TrajectoryStep]) -> list[str]:
    keys = []
    for step in history:
        match = _LOOKUP_ACTION_RE.search(step.action)
        if match:
            keys.append(match.group(1))
    return keys


def sim_agent_step(
    task: TaskSpec,
    history,
    memory_response: MemoryResponse,
    seed: int = 0,
) -> tuple[str, str]:
    """One scripted decision: returns (action, observation).

    Memory items naming a key that exists in this task's tool table are
    probed first, in response order; otherwise the fixed exploration script
    continues. Pure function of its arguments.
    """
    probed = set(probed_keys(history))
    table_keys = set(task.tool_table)
    hinted: list[str] = []
    for item in memory_response.items:
        for key in keys_in(item.content, table_keys):
            if key not in probed and key not in hinted:
                hinted.append(key)
    if hinted:
        key = hinted[0]
    else:
        key = next(k for k in exploration_order(task, seed) if k not in probed)
    return f"lookup({key})", task.tool_table[key]
