"""Synthetic desk-scale task suite.

Each task hides one gold fact behind a family-specific tool key inside a
small tool table. Task ids follow ``<family_id>:<nn>`` so diagnostics can
recover the family from a trajectory. Families share their key and table
size across instances; the per-instance values differ, so remembering the
family's key helps while remembering a stale answer does not.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from .jsonutil import read_jsonl, write_jsonl

_ADJECTIVES = (
    "amber", "basalt", "cedar", "delta", "ember", "fjord", "garnet", "hazel",
    "indigo", "jasper", "krypton", "lunar", "maple", "nimbus", "ochre", "pewter",
    "quartz", "russet", "saffron", "tundra", "umber", "velvet", "walnut", "xenon",
    "yarrow", "zephyr", "cobalt", "drift", "ferric", "glacier",
)
_NOUNS = (
    "harbor", "ledger", "archive", "beacon", "canyon", "dynamo", "estuary",
    "furnace", "gallery", "hangar", "isthmus", "junction", "kiln", "lattice",
    "meadow", "nursery", "orchard", "plateau", "quarry", "reservoir", "summit",
    "terrace", "uplands", "vault", "wharf", "yard", "zenith", "basin", "crest", "den",
)
_DECOY_WORDS = (
    "draft", "mirror", "spare", "backup", "index", "cache", "shadow", "probe",
    "stale", "vent", "relay", "attic", "annex", "stub",
)
_VALUE_WORDS = (
    "falcon", "onyx", "tide", "spruce", "comet", "raven", "opal", "birch",
    "storm", "lynx", "coral", "aspen", "frost", "heron",
)


class TaskError(Exception):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family_id: str
    query: str
    gold_answer: str
    tool_table: dict[str, str] = field(default_factory=dict)
    max_steps: int = 8

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise TaskError(f"task {self.task_id}: max_steps must be >= 1")
        if not self.tool_table:
            raise TaskError(f"task {self.task_id}: empty tool table")
        holders = [k for k, v in self.tool_table.items() if v == self.gold_answer]
        if len(holders) != 1:
            raise TaskError(
                f"task {self.task_id}: gold answer must appear exactly once in the tool table"
            )

    def gold_key(self) -> str:
        for key, value in self.tool_table.items():
            if value == self.gold_answer:
                return key
        raise TaskError(f"task {self.task_id}: no gold key")  # unreachable after validation

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "family_id": self.family_id,
            "query": self.query,
            "gold_answer": self.gold_answer,
            "tool_table": dict(self.tool_table),
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            task_id=d["task_id"],
            family_id=d["family_id"],
            query=d["query"],
            gold_answer=d["gold_answer"],
            tool_table=dict(d["tool_table"]),
            max_steps=int(d["max_steps"]),
        )


def family_of(task_id: str) -> str:
    """Family recovery from the id convention '<family>:<nn>'."""
    return task_id.split(":", 1)[0]


def generate_pool(
    n_families: int = 40,
    tasks_per_family: int = 5,
    seed: int = 0,
    *,
    min_tools: int = 3,
    max_tools: int = 7,
    step_margin: int = 2,
) -> list[TaskSpec]:
    """Deterministic task pool: n_families * tasks_per_family tasks."""
    combos = [(a, n) for a in _ADJECTIVES for n in _NOUNS]
    if n_families > len(combos):
        raise TaskError(f"at most {len(combos)} families supported, got {n_families}")
    rng = random.Random(seed)
    chosen = rng.sample(combos, n_families)
    pool: list[TaskSpec] = []
    for fam_idx, (adj, noun) in enumerate(chosen):
        family_id = f"fam{fam_idx:03d}-{adj}-{noun}"
        gold_key = f"{adj}_{noun}"
        n_tools = rng.randint(min_tools, max_tools)
        decoy_keys = [f"{gold_key}_{w}" for w in rng.sample(_DECOY_WORDS, n_tools - 1)]
        for inst in range(tasks_per_family):
            numbers = rng.sample(range(100, 1000), n_tools)
            words = [rng.choice(_VALUE_WORDS) for _ in range(n_tools)]
            values = [f"{w}{num}" for w, num in zip(words, numbers)]
            keys = decoy_keys + [gold_key]
            rng.shuffle(keys)
            table = {k: v for k, v in zip(keys, values)}
            gold_answer = table[gold_key]
            pool.append(
                TaskSpec(
                    task_id=f"{family_id}:{inst:02d}",
                    family_id=family_id,
                    query=(
                        f"which value is filed under the {adj} {noun} register"
                        f" (case {inst:02d})?"
                    ),
                    gold_answer=gold_answer,
                    tool_table=table,
                    max_steps=n_tools + step_margin,
                )
            )
    return pool


def exposure_stream(n_families: int = 20, exposures: int = 2, seed: int = 0) -> list[TaskSpec]:
    """Ordered stream: every family once, then every family again (new
    instances), et cetera. Used to measure whether memory transfers within a
    family across exposures."""
    pool = generate_pool(n_families, tasks_per_family=exposures, seed=seed)
    by_family: dict[str, list[TaskSpec]] = {}
    for task in pool:
        by_family.setdefault(task.family_id, []).append(task)
    stream: list[TaskSpec] = []
    for round_idx in range(exposures):
        for family in sorted(by_family):
            stream.append(by_family[family][round_idx])
    return stream


def write_tasks(path: str | Path, tasks) -> None:
    write_jsonl(path, (t.to_dict() for t in tasks))


def read_tasks(path: str | Path) -> list[TaskSpec]:
    try:
        return [TaskSpec.from_dict(rec) for rec in read_jsonl(path)]
    except (KeyError, TypeError) as exc:
        raise TaskError(f"malformed task record in {path}: {exc}") from exc
