"""Experience evolution: run a fixed architecture over a task batch and
measure the (perf, cost, delay) feedback it earns.

Each candidate gets a fresh provider per batch (memory always starts empty);
online mode ingests every finished episode before the next one, offline mode
preloads a trajectory corpus and then evaluates with ingestion frozen. Cost
is the gateway ledger delta attributable to the episode: USD when prices are
configured, total tokens otherwise.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path

from .carriers import MemoryRequest, TrajectoryData, TrajectoryStep, make_trajectory
from .gateway import Gateway, UsageTotals
from .genotype import MemoryGenotype, require_valid, save_genotype
from .jsonutil import read_json, read_jsonl, write_json, write_jsonl
from .provider import GenotypeProvider, instantiate
from .simulator import SimAgent, sim_agent_step
from .tasks import TaskSpec

logger = logging.getLogger(__name__)

MODES = ("online", "offline")

TRAJECTORIES_FILE = "trajectories.jsonl"
SUMMARY_FILE = "summary.json"
GENOTYPE_FILE = "genotype.json"


class InnerLoopError(Exception):
    pass


@dataclass(frozen=True)
class FeedbackVector:
    """Per-episode feedback: task performance, resource cost, latency."""

    perf: float
    cost: float
    delay: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.perf <= 1.0:
            raise ValueError(f"perf {self.perf} outside [0, 1]")
        if self.cost < 0 or self.delay < 0:
            raise ValueError("cost and delay must be >= 0")

    def to_dict(self) -> dict:
        return {"perf": self.perf, "cost": self.cost, "delay": self.delay}


@dataclass(frozen=True)
class FeedbackSummary:
    perf_mean: float
    cost_mean: float
    delay_mean: float
    n: int
    per_task: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.per_task:
            if len(self.per_task) != self.n:
                raise ValueError("per_task size must equal n")
            for name, mean in (
                ("perf", self.perf_mean),
                ("cost", self.cost_mean),
                ("delay", self.delay_mean),
            ):
                computed = sum(v[name] for v in self.per_task.values()) / self.n
                if abs(computed - mean) > 1e-9:
                    raise ValueError(f"{name}_mean inconsistent with per_task values")

    def to_dict(self) -> dict:
        return {
            "perf_mean": self.perf_mean,
            "cost_mean": self.cost_mean,
            "delay_mean": self.delay_mean,
            "n": self.n,
            "per_task": {k: dict(v) for k, v in sorted(self.per_task.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackSummary":
        return cls(
            perf_mean=float(d["perf_mean"]),
            cost_mean=float(d["cost_mean"]),
            delay_mean=float(d["delay_mean"]),
            n=int(d["n"]),
            per_task={k: dict(v) for k, v in d.get("per_task", {}).items()},
        )


def aggregate(feedbacks, task_ids=None) -> FeedbackSummary:
    """Arithmetic mean per dimension over a batch of feedback vectors."""
    feedbacks = list(feedbacks)
    if not feedbacks:
        raise InnerLoopError("cannot aggregate an empty batch")
    if task_ids is None:
        task_ids = [f"t{i}" for i in range(len(feedbacks))]
    task_ids = list(task_ids)
    if len(task_ids) != len(feedbacks):
        raise InnerLoopError("task_ids and feedbacks must be parallel")
    n = len(feedbacks)
    return FeedbackSummary(
        perf_mean=sum(f.perf for f in feedbacks) / n,
        cost_mean=sum(f.cost for f in feedbacks) / n,
        delay_mean=sum(f.delay for f in feedbacks) / n,
        n=n,
        per_task={tid: f.to_dict() for tid, f in zip(task_ids, feedbacks)},
    )


@dataclass(frozen=True)
class TaskBatch:
    iteration: int
    new_tasks: tuple[TaskSpec, ...]
    reused_tasks: tuple[TaskSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "new_tasks", tuple(self.new_tasks))
        object.__setattr__(self, "reused_tasks", tuple(self.reused_tasks))
        ids = [t.task_id for t in self.all_tasks]
        if len(ids) != len(set(ids)):
            raise InnerLoopError("task id collision inside one batch")

    @property
    def all_tasks(self) -> tuple[TaskSpec, ...]:
        # Reused tasks always run last.
        return self.new_tasks + self.reused_tasks

    def __len__(self) -> int:
        return len(self.new_tasks) + len(self.reused_tasks)


def _batch_rng(seed: int, iteration: int) -> random.Random:
    digest = blake2b(f"batch|{seed}|{iteration}".encode("utf-8"), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "little"))


def compose_batch(
    task_pool,
    previous_batch: TaskBatch | None,
    n_new: int,
    n_reused: int,
    seed: int,
) -> TaskBatch:
    """Seeded sampling without replacement: fresh tasks from the pool plus a
    reused slice of the previous batch. Iteration 0 draws everything fresh."""
    pool = list(task_pool)
    if previous_batch is None:
        need = n_new + n_reused
        if len(pool) < need:
            raise InnerLoopError(f"task pool has {len(pool)} tasks, need {need}")
        rng = _batch_rng(seed, 0)
        return TaskBatch(iteration=0, new_tasks=tuple(rng.sample(pool, need)))
    prev_ids = {t.task_id for t in previous_batch.all_tasks}
    fresh = [t for t in pool if t.task_id not in prev_ids]
    if len(fresh) < n_new:
        raise InnerLoopError(
            f"task pool has {len(fresh)} unused tasks, need {n_new} new"
        )
    if len(previous_batch) < n_reused:
        raise InnerLoopError(
            f"previous batch has {len(previous_batch)} tasks, need {n_reused} reused"
        )
    rng = _batch_rng(seed, previous_batch.iteration + 1)
    new = tuple(rng.sample(fresh, n_new))
    reused = tuple(rng.sample(list(previous_batch.all_tasks), n_reused))
    return TaskBatch(iteration=previous_batch.iteration + 1, new_tasks=new, reused_tasks=reused)


def _render_context(steps) -> str:
    if not steps:
        return "start"
    last = steps[-1]
    return f"last: {last.action} -> {last.observation}"


def run_episode(
    agent: SimAgent,
    task: TaskSpec,
    provider: GenotypeProvider,
    *,
    ingest: bool = True,
    success_threshold: float = 1.0,
) -> tuple[TrajectoryData, FeedbackVector]:
    """One task attempt: step loop with per-step retrieval, then feedback.

    Online mode (ingest=True) absorbs the finished trajectory before
    returning, so its encoding cost lands inside this episode's ledger delta.
    """
    gateway = getattr(provider, "gateway", None)
    before = gateway.ledger.total() if gateway is not None else UsageTotals()
    steps: list[TrajectoryStep] = []
    provided: list[str] = []
    solved = False
    for t in range(task.max_steps):
        request = MemoryRequest(
            query=task.query,
            context=_render_context(steps),
            stage="planning" if t == 0 else "execution",
            max_items=agent.max_memory_items,
        )
        response = provider.provide_memory(request)
        provided.extend(item.id for item in response.items)
        try:
            action, observation = sim_agent_step(task, steps, response, agent.seed)
        except Exception as exc:  # noqa: BLE001 - agent faults become failures
            logger.warning("agent fault on %s at step %d: %s", task.task_id, t, exc)
            break
        mem_chars = sum(len(item.content) for item in response.items)
        steps.append(
            TrajectoryStep(
                index=t,
                agent_id=agent.agent_id,
                state_summary=request.context,
                action=action,
                observation=observation,
                tokens_in=(len(task.query) + len(request.context) + mem_chars) // 4,
                tokens_out=(len(action) + len(observation)) // 4,
            )
        )
        if observation == task.gold_answer:
            solved = True
            break

    traj = make_trajectory(
        task.task_id,
        task.query,
        steps,
        reward=1.0 if solved else 0.0,
        success_threshold=success_threshold,
        provided_memory_ids=provided,
    )
    provider.note_episode_outcome(provided, traj.success)
    if ingest:
        ok, desc = provider.take_in_memory(traj)
        if not ok:
            logger.debug("ingest rejected for %s: %s", task.task_id, desc)
    if gateway is not None:
        delta = gateway.ledger.total() - before
        cost = delta.tokens if gateway.price_table.is_free else delta.cost_usd
    else:
        cost = 0.0
    feedback = FeedbackVector(perf=traj.reward, cost=float(cost), delay=float(len(steps)))
    return traj, feedback


@dataclass(frozen=True)
class RunResult:
    genotype: MemoryGenotype
    summary: FeedbackSummary
    trajectories: tuple[TrajectoryData, ...]
    ingest_trace: tuple[int, ...]
    ledger_delta: UsageTotals


def run_batch(
    genotype: MemoryGenotype,
    batch: TaskBatch,
    *,
    gateway: Gateway,
    mode: str = "online",
    seed: int = 0,
    out_dir: str | Path | None = None,
    corpus=None,
    success_threshold: float = 1.0,
) -> RunResult:
    """Evaluate one candidate on one batch with a fresh provider."""
    if mode not in MODES:
        raise InnerLoopError(f"unknown mode {mode!r}; expected one of {MODES}")
    require_valid(genotype)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for stale in ("memory.jsonl", "vectors.bin", "vectors.manifest", "manage.log"):
            (out_dir / stale).unlink(missing_ok=True)
    provider = instantiate(genotype, gateway, seed=seed, storage_dir=out_dir)
    provider.initialize()
    before = gateway.ledger.total()

    if mode == "offline":
        for traj in corpus or ():
            provider.take_in_memory(traj)

    agent = SimAgent(seed=seed)
    trajectories: list[TrajectoryData] = []
    feedbacks: list[FeedbackVector] = []
    ingest_trace: list[int] = []
    for task in batch.all_tasks:
        traj, fb = run_episode(
            agent,
            task,
            provider,
            ingest=(mode == "online"),
            success_threshold=success_threshold,
        )
        trajectories.append(traj)
        feedbacks.append(fb)
        ingest_trace.append(provider.ingest_counter)

    summary = aggregate(feedbacks, [t.task_id for t in batch.all_tasks])
    delta = gateway.ledger.total() - before
    if out_dir is not None:
        save_genotype(genotype, out_dir / GENOTYPE_FILE)
        write_jsonl(out_dir / TRAJECTORIES_FILE, (t.to_dict() for t in trajectories))
        write_json(out_dir / SUMMARY_FILE, summary.to_dict())
        provider.save()
    return RunResult(
        genotype=genotype,
        summary=summary,
        trajectories=tuple(trajectories),
        ingest_trace=tuple(ingest_trace),
        ledger_delta=delta,
    )


def load_run_dir(path: str | Path) -> tuple[FeedbackSummary, list[TrajectoryData]]:
    """Load one candidate directory; errors name the directory."""
    path = Path(path)
    traj_path = path / TRAJECTORIES_FILE
    summary_path = path / SUMMARY_FILE
    if not traj_path.exists() or not summary_path.exists():
        raise InnerLoopError(f"run directory {path} is missing {TRAJECTORIES_FILE} or {SUMMARY_FILE}")
    trajectories = [TrajectoryData.from_dict(rec) for rec in read_jsonl(traj_path)]
    summary = FeedbackSummary.from_dict(read_json(summary_path))
    return summary, trajectories
