"""Data carriers shared by every memory architecture.

These are the fixed interchange types: memory items, trajectories, retrieval
requests/responses, and maintenance reports. They are immutable; bookkeeping
updates (hit counts, success credit) go through ``dataclasses.replace`` inside
the store layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

ITEM_KINDS = ("raw_trajectory", "insight", "tip", "shortcut", "workflow", "tool_spec")
STAGES = ("planning", "execution", "reflection")


@dataclass(frozen=True)
class MemoryItem:
    """One unit of stored experience."""

    id: str
    kind: str
    content: str
    source_task_id: str
    created_at_step: int
    confidence: float = 0.5
    hit_count: int = 0
    success_assoc: int = 0

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("MemoryItem.id must be non-empty")
        if self.kind not in ITEM_KINDS:
            raise ValueError(f"unknown item kind {self.kind!r}")
        if not self.content:
            raise ValueError("MemoryItem.content must be non-empty")
        if self.created_at_step < 0:
            raise ValueError("created_at_step must be >= 0")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.success_assoc < 0 or self.hit_count < self.success_assoc:
            raise ValueError("need hit_count >= success_assoc >= 0")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "content": self.content,
            "source_task_id": self.source_task_id,
            "created_at_step": self.created_at_step,
            "confidence": self.confidence,
            "hit_count": self.hit_count,
            "success_assoc": self.success_assoc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryItem":
        return cls(
            id=d["id"],
            kind=d["kind"],
            content=d["content"],
            source_task_id=d["source_task_id"],
            created_at_step=int(d["created_at_step"]),
            confidence=float(d["confidence"]),
            hit_count=int(d["hit_count"]),
            success_assoc=int(d["success_assoc"]),
        )


@dataclass(frozen=True)
class TrajectoryStep:
    index: int
    agent_id: str
    state_summary: str
    action: str
    observation: str
    tokens_in: int = 0
    tokens_out: int = 0

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("step index must be >= 0")
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "agent_id": self.agent_id,
            "state_summary": self.state_summary,
            "action": self.action,
            "observation": self.observation,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        return cls(
            index=int(d["index"]),
            agent_id=d["agent_id"],
            state_summary=d["state_summary"],
            action=d["action"],
            observation=d["observation"],
            tokens_in=int(d["tokens_in"]),
            tokens_out=int(d["tokens_out"]),
        )


@dataclass(frozen=True)
class TrajectoryData:
    """A finished episode: steps plus outcome bookkeeping.

    ``total_tokens`` must equal the sum over steps; the constructor enforces
    it so no code path can produce an inconsistent record.
    """

    task_id: str
    query: str
    steps: tuple[TrajectoryStep, ...]
    reward: float
    success: bool
    total_tokens: int
    wall_delay: float
    provided_memory_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "provided_memory_ids", tuple(self.provided_memory_ids))
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [0, 1]")
        if self.wall_delay < 0:
            raise ValueError("wall_delay must be >= 0")
        for pos, step in enumerate(self.steps):
            if step.index != pos:
                raise ValueError("step indices must be contiguous from 0")
        expected = sum(s.tokens_in + s.tokens_out for s in self.steps)
        if self.total_tokens != expected:
            raise ValueError(
                f"total_tokens {self.total_tokens} != sum over steps {expected}"
            )

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "query": self.query,
            "steps": [s.to_dict() for s in self.steps],
            "reward": self.reward,
            "success": self.success,
            "total_tokens": self.total_tokens,
            "wall_delay": self.wall_delay,
            "provided_memory_ids": list(self.provided_memory_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryData":
        return cls(
            task_id=d["task_id"],
            query=d["query"],
            steps=tuple(TrajectoryStep.from_dict(s) for s in d["steps"]),
            reward=float(d["reward"]),
            success=bool(d["success"]),
            total_tokens=int(d["total_tokens"]),
            wall_delay=float(d["wall_delay"]),
            provided_memory_ids=tuple(d["provided_memory_ids"]),
        )


def make_trajectory(
    task_id: str,
    query: str,
    steps: Sequence[TrajectoryStep],
    reward: float,
    *,
    success_threshold: float = 1.0,
    wall_delay: float | None = None,
    provided_memory_ids: Iterable[str] = (),
) -> TrajectoryData:
    """Build a consistent TrajectoryData, deriving the redundant fields."""
    steps = tuple(steps)
    return TrajectoryData(
        task_id=task_id,
        query=query,
        steps=steps,
        reward=reward,
        success=reward >= success_threshold,
        total_tokens=sum(s.tokens_in + s.tokens_out for s in steps),
        wall_delay=float(len(steps)) if wall_delay is None else wall_delay,
        provided_memory_ids=tuple(provided_memory_ids),
    )


@dataclass(frozen=True)
class MemoryRequest:
    """What an agent asks the memory for at one step."""

    query: str
    context: str = ""
    stage: str = "execution"
    max_items: int = 8
    status: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.max_items < 0:
            raise ValueError("max_items must be >= 0")


@dataclass(frozen=True)
class MemoryResponse:
    items: tuple[MemoryItem, ...]
    scores: tuple[float, ...]
    rationale: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "scores", tuple(self.scores))
        if len(self.items) != len(self.scores):
            raise ValueError("items and scores must be parallel")
        for a, b in zip(self.scores, self.scores[1:]):
            if b > a:
                raise ValueError("scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.items)


EMPTY_RESPONSE = MemoryResponse(items=(), scores=())


@dataclass(frozen=True)
class ManageReport:
    """Outcome of one maintenance pass.

    ``minted`` records consolidation products as (new_id, parent_ids) pairs;
    MemoryItem itself has no parent field, so this is where lineage of merged
    items lives (mirrored into manage.log).
    """

    merged: int = 0
    pruned: int = 0
    deduplicated: int = 0
    minted: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self) -> None:
        if min(self.merged, self.pruned, self.deduplicated) < 0:
            raise ValueError("report counts must be >= 0")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.merged, self.pruned, self.deduplicated)

    def to_dict(self) -> dict:
        return {
            "merged": self.merged,
            "pruned": self.pruned,
            "deduplicated": self.deduplicated,
            "minted": [[new_id, list(parents)] for new_id, parents in self.minted],
        }


def with_hit(item: MemoryItem) -> MemoryItem:
    return replace(item, hit_count=item.hit_count + 1)


def with_success(item: MemoryItem) -> MemoryItem:
    return replace(item, success_assoc=item.success_assoc + 1)
