"""Architectural evolution: the outer loop that searches over genotypes.

Each iteration evaluates the current candidate set on a shared task batch,
non-dominated-sorts the (perf, -cost, -delay) summaries, picks top-K parents,
diagnoses each parent's defects from its own records, and designs S
descendants per parent. The next candidate set is the union of descendants
(parents are carried over only when elitism is on). Every evaluated
candidate leaves one canonical-JSON audit record in evolution.jsonl, so
identical configs replay byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .carriers import MemoryItem, TrajectoryData
from .gateway import Gateway, GatewayError, synthetic_tokens
from .genotype import (
    MOVE_TAGS,
    GenotypeError,
    MemoryGenotype,
    genotype_hash,
    load_genotype,
    mutate,
    preset,
    preset_names,
    save_genotype,
    validate,
)
from .innerloop import (
    MODES,
    FeedbackSummary,
    RunResult,
    TaskBatch,
    compose_batch,
    run_batch,
)
from .jsonutil import append_jsonl, canonical_dumps, read_json, write_json
from .prompts import render
from .tasks import TaskSpec, family_of
from .text import first_key_token, tokenize

logger = logging.getLogger(__name__)

PROPOSERS = ("deterministic", "llm")

EVOLUTION_LOG = "evolution.jsonl"
STATE_FILE = "state.json"
CHAMPION_FILE = "champion.genotype.json"

# Version of the defect-to-mutation bias rules below; bump when they change.
BIAS_TABLE_VERSION = 1

_LOW_HIT_RATE = 0.3
_HIGH_TOKEN_OVERHEAD = 0.5
_HIGH_DEAD_FRACTION = 0.5
_HIGH_STORE_GROWTH = 4.0


class EvolutionError(Exception):
    pass


def summary_vector(summary: FeedbackSummary) -> tuple[float, float, float]:
    """Higher-is-better projection: (perf, -cost, -delay)."""
    return (summary.perf_mean, -summary.cost_mean, -summary.delay_mean)


def dominates(a, b) -> bool:
    """a dominates b: >= everywhere and > somewhere."""
    if len(a) != len(b):
        raise EvolutionError("vectors must share a dimension")
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def pareto_rank(vectors) -> list[int]:
    """Non-dominated sorting: rank 0 is the Pareto front, rank 1 the front
    after removing rank 0, and so on. Equal vectors share a rank."""
    vectors = [tuple(v) for v in vectors]
    ranks: list[int] = [-1] * len(vectors)
    remaining = set(range(len(vectors)))
    current = 0
    while remaining:
        front = [
            i
            for i in remaining
            if not any(dominates(vectors[j], vectors[i]) for j in remaining if j != i)
        ]
        if not front:
            raise EvolutionError("dominance cycle; inputs are not a partial order")
        for i in front:
            ranks[i] = current
        remaining.difference_update(front)
        current += 1
    return ranks


@dataclass(frozen=True)
class CandidateRecord:
    genotype: MemoryGenotype
    summary: FeedbackSummary
    iteration: int
    rank: int = -1

    @property
    def vector(self) -> tuple[float, float, float]:
        return summary_vector(self.summary)

    def to_dict(self) -> dict:
        return {
            "genotype": self.genotype.to_dict(),
            "summary": self.summary.to_dict(),
            "iteration": self.iteration,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateRecord":
        return cls(
            genotype=MemoryGenotype.from_dict(d["genotype"]),
            summary=FeedbackSummary.from_dict(d["summary"]),
            iteration=int(d["iteration"]),
            rank=int(d["rank"]),
        )


def rank_candidates(records) -> list[CandidateRecord]:
    ranks = pareto_rank([r.vector for r in records])
    return [replace(rec, rank=rank) for rec, rank in zip(records, ranks)]


def select_parents(records, k: int) -> list[CandidateRecord]:
    """Top-k by (pareto rank, perf desc, name). Permutation-invariant."""
    if k < 1:
        raise EvolutionError("k must be >= 1")
    if any(r.rank < 0 for r in records):
        raise EvolutionError("candidates must be ranked before selection")
    ordered = sorted(
        records, key=lambda r: (r.rank, -r.summary.perf_mean, r.genotype.name)
    )
    return ordered[:k]


# ---------------------------------------------------------------------------
# Diagnosis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DefectProfile:
    retrieval_hit_rate: float
    dead_item_fraction: float
    memory_token_overhead: float
    failure_families: tuple[str, ...]
    store_growth: float
    narrative: str = ""

    def to_dict(self) -> dict:
        return {
            "retrieval_hit_rate": self.retrieval_hit_rate,
            "dead_item_fraction": self.dead_item_fraction,
            "memory_token_overhead": self.memory_token_overhead,
            "failure_families": list(self.failure_families),
            "store_growth": self.store_growth,
            "narrative": self.narrative,
        }


def diagnose(
    candidate: CandidateRecord,
    trajectories,
    store_items,
    *,
    gateway: Gateway | None = None,
) -> DefectProfile:
    """Structural defect metrics computed purely from records.

    An item counts as referenced when its content's key token (first
    tool-style identifier) appears among the actions of an episode it was
    provided to. The optional narrative is only requested when the gateway
    can actually answer (real mode, or a stub fixture exists).
    """
    trajectories = list(trajectories)
    store_items = list(store_items)
    items_by_id = {item.id: item for item in store_items}

    provided_pairs = 0
    referenced = 0
    memory_tokens = 0
    total_tokens = 0
    fam_success: dict[str, list[int]] = {}
    for traj in trajectories:
        total_tokens += traj.total_tokens
        action_tokens = set()
        for step in traj.steps:
            action_tokens.update(tokenize(step.action))
        for item_id in sorted(set(traj.provided_memory_ids)):
            item = items_by_id.get(item_id)
            if item is None:
                continue  # pruned or merged since; cannot assess
            provided_pairs += 1
            key = first_key_token(item.content)
            if key is not None and key in action_tokens:
                referenced += 1
        for item_id in traj.provided_memory_ids:
            item = items_by_id.get(item_id)
            if item is not None:
                memory_tokens += synthetic_tokens(item.content)
        stats = fam_success.setdefault(family_of(traj.task_id), [0, 0])
        stats[0] += 1 if traj.success else 0
        stats[1] += 1

    hit_rate = referenced / provided_pairs if provided_pairs else 0.0
    dead = (
        sum(1 for item in store_items if item.hit_count == 0) / len(store_items)
        if store_items
        else 0.0
    )
    overhead = min(1.0, memory_tokens / total_tokens) if total_tokens else 0.0
    failures = tuple(
        sorted(fam for fam, (wins, n) in fam_success.items() if wins / n < 0.5)
    )
    growth = len(store_items) / len(trajectories) if trajectories else 0.0

    narrative = ""
    if gateway is not None:
        prompt = render(
            "diagnose",
            genotype=canonical_dumps(candidate.genotype.to_dict()),
            metrics=canonical_dumps(
                {
                    "retrieval_hit_rate": hit_rate,
                    "dead_item_fraction": dead,
                    "memory_token_overhead": overhead,
                    "store_growth": growth,
                }
            ),
            failures=", ".join(failures) or "none",
        )
        if gateway.has_fixture("diagnose", prompt):
            try:
                narrative, _ = gateway.complete(prompt, tag="diagnose")
            except GatewayError as exc:
                logger.warning("diagnose narrative unavailable: %s", exc)

    return DefectProfile(
        retrieval_hit_rate=hit_rate,
        dead_item_fraction=dead,
        memory_token_overhead=overhead,
        failure_families=failures,
        store_growth=growth,
        narrative=narrative,
    )


# ---------------------------------------------------------------------------
# Design
# ---------------------------------------------------------------------------

def bias_weights(profile: DefectProfile | None) -> dict[str, float]:
    """Defect-to-mutation bias table (version BIAS_TABLE_VERSION).

    Low hit rate pushes toward retrieval changes; high token overhead pushes
    toward shrinking retrieve.k or encode.max_chars; a store full of dead
    items pushes toward maintenance and smaller encodes; runaway growth
    pushes toward maintenance.
    """
    weights = {tag: 1.0 for tag in MOVE_TAGS}
    if profile is None:
        return weights
    if profile.retrieval_hit_rate < _LOW_HIT_RATE:
        for tag in MOVE_TAGS:
            if tag.startswith("retrieve."):
                weights[tag] *= 4.0
    if profile.memory_token_overhead > _HIGH_TOKEN_OVERHEAD:
        for tag in ("retrieve.k_down", "encode.max_chars_down"):
            weights[tag] *= 8.0
    if profile.dead_item_fraction > _HIGH_DEAD_FRACTION:
        for tag in MOVE_TAGS:
            if tag.startswith("manage.") or tag == "encode.max_items_down":
                weights[tag] *= 3.0
    if profile.store_growth > _HIGH_STORE_GROWTH:
        for tag in MOVE_TAGS:
            if tag.startswith("manage."):
                weights[tag] *= 2.0
    return weights


def _config_key(g: MemoryGenotype) -> str:
    d = g.to_dict()
    d.pop("name", None)
    d.pop("lineage", None)
    return canonical_dumps(d)


def _extract_json_object(text: str) -> dict | None:
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    for pos in range(start, len(text)):
        if text[pos] == "{":
            depth += 1
        elif text[pos] == "}":
            depth -= 1
            if depth == 0:
                try:
                    out = json.loads(text[start : pos + 1])
                except json.JSONDecodeError:
                    return None
                return out if isinstance(out, dict) else None
    return None


def _proposal_name(parent: MemoryGenotype, seed: int, index: int) -> str:
    material = f"{genotype_hash(parent)}|{seed}|{index}|llm".encode("utf-8")
    return "g" + hashlib.blake2b(material, digest_size=5).hexdigest()


def _llm_propose(
    parent: MemoryGenotype,
    profile: DefectProfile,
    index: int,
    seed: int,
    gateway: Gateway,
) -> MemoryGenotype | None:
    """Ask the gateway for a revised genotype; at most two repair rounds."""
    feedback = ""
    for _ in range(3):
        prompt = render(
            "design",
            genotype=canonical_dumps(parent.to_dict()),
            metrics=canonical_dumps(profile.to_dict()),
            index=str(index),
            feedback=feedback,
        )
        try:
            text, _ = gateway.complete(prompt, tag="design")
        except GatewayError as exc:
            logger.warning("design proposal failed: %s", exc)
            return None
        data = _extract_json_object(text)
        if data is None:
            feedback = "Previous reply was not a parseable JSON object. Reply with JSON only."
            continue
        data.setdefault("schema_version", parent.schema_version)
        data["name"] = _proposal_name(parent, seed, index)
        data["lineage"] = list(parent.lineage + (parent.name,))
        try:
            child = MemoryGenotype.from_dict(data)
        except GenotypeError as exc:
            feedback = f"Previous reply was malformed: {exc}. Reply with the full JSON object."
            continue
        violations = validate(child)
        if violations:
            feedback = "Previous proposal was invalid: " + "; ".join(violations)
            continue
        return child
    return None


def design(
    parent: CandidateRecord,
    profile: DefectProfile,
    descendants: int,
    *,
    proposer: str = "deterministic",
    seed: int = 0,
    gateway: Gateway | None = None,
) -> list[MemoryGenotype]:
    """Produce `descendants` distinct valid children of one parent.

    The deterministic proposer is profile-biased mutation. The llm proposer
    asks the gateway and falls back to deterministic mutation when proposals
    stay invalid; fallback children are tagged with a "-fb" name suffix.
    """
    if proposer not in PROPOSERS:
        raise EvolutionError(f"unknown proposer {proposer!r}; expected one of {PROPOSERS}")
    if proposer == "llm" and gateway is None:
        raise EvolutionError("llm proposer requires a gateway")
    weights = bias_weights(profile)
    taken = {_config_key(parent.genotype)}
    children: list[MemoryGenotype] = []
    for index in range(1, descendants + 1):
        child: MemoryGenotype | None = None
        fell_back = False
        if proposer == "llm":
            child = _llm_propose(parent.genotype, profile, index, seed, gateway)
            if child is not None and _config_key(child) in taken:
                child = None
            fell_back = child is None
        if child is None:
            for salt in range(32):
                candidate = mutate(
                    parent.genotype, seed, index, move_weights=weights, salt=salt
                )
                if _config_key(candidate) not in taken:
                    child = candidate
                    break
            if child is None:
                # The neighborhood is smaller than requested; accept a repeat.
                child = mutate(parent.genotype, seed, index, move_weights=weights)
            if proposer == "llm" and fell_back:
                child = replace(child, name=child.name + "-fb")
        taken.add(_config_key(child))
        children.append(child)
    return children


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvolveConfig:
    k_max: int = 3
    survivors: int = 1
    descendants: int = 3
    n_new: int = 40
    n_reused: int = 20
    seed: int = 0
    proposer: str = "deterministic"
    elitism: bool = False
    initial: str = "dilu"
    mode: str = "online"

    def __post_init__(self) -> None:
        if self.k_max < 1 or self.survivors < 1 or self.descendants < 1:
            raise EvolutionError("K_max, K, and S must all be >= 1")
        if self.n_new < 0 or self.n_reused < 0 or self.n_new + self.n_reused < 1:
            raise EvolutionError("batch sizes must be >= 0 and sum to >= 1")
        if self.proposer not in PROPOSERS:
            raise EvolutionError(f"unknown proposer {self.proposer!r}")
        if self.mode not in MODES:
            raise EvolutionError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "K_max": self.k_max,
            "K": self.survivors,
            "S": self.descendants,
            "n_new": self.n_new,
            "n_reused": self.n_reused,
            "seed": self.seed,
            "proposer": self.proposer,
            "elitism": self.elitism,
            "initial": self.initial,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvolveConfig":
        known = {"K_max", "K", "S", "n_new", "n_reused", "seed", "proposer", "elitism", "initial", "mode"}
        unknown = set(d) - known
        if unknown:
            raise EvolutionError(f"unknown evolve config keys: {sorted(unknown)}")
        base = cls()
        return cls(
            k_max=int(d.get("K_max", base.k_max)),
            survivors=int(d.get("K", base.survivors)),
            descendants=int(d.get("S", base.descendants)),
            n_new=int(d.get("n_new", base.n_new)),
            n_reused=int(d.get("n_reused", base.n_reused)),
            seed=int(d.get("seed", base.seed)),
            proposer=str(d.get("proposer", base.proposer)),
            elitism=bool(d.get("elitism", base.elitism)),
            initial=str(d.get("initial", base.initial)),
            mode=str(d.get("mode", base.mode)),
        )


def resolve_initial(spec: str) -> MemoryGenotype:
    """Initial candidate: a preset name or a genotype file path."""
    if spec in preset_names():
        return preset(spec)
    path = Path(spec)
    if path.exists():
        return load_genotype(path)
    raise EvolutionError(
        f"initial {spec!r} is neither a preset ({', '.join(preset_names())}) nor a file"
    )


@dataclass
class EvolutionState:
    config: EvolveConfig
    iteration: int = 0
    pending: list[MemoryGenotype] = field(default_factory=list)
    candidates: list[CandidateRecord] = field(default_factory=list)
    parents: list[str] = field(default_factory=list)
    last_batch: dict | None = None
    episodes_total: int = 0
    candidates_total: int = 0
    hash_by_name: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "pending": [g.to_dict() for g in self.pending],
            "candidates": [c.to_dict() for c in self.candidates],
            "parents": list(self.parents),
            "last_batch": self.last_batch,
            "episodes_total": self.episodes_total,
            "candidates_total": self.candidates_total,
            "hash_by_name": dict(self.hash_by_name),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionState":
        return cls(
            config=EvolveConfig.from_dict(d["config"]),
            iteration=int(d["iteration"]),
            pending=[MemoryGenotype.from_dict(g) for g in d["pending"]],
            candidates=[CandidateRecord.from_dict(c) for c in d["candidates"]],
            parents=list(d["parents"]),
            last_batch=d.get("last_batch"),
            episodes_total=int(d["episodes_total"]),
            candidates_total=int(d["candidates_total"]),
            hash_by_name=dict(d["hash_by_name"]),
        )


def _design_seed(seed: int, iteration: int) -> int:
    digest = hashlib.blake2b(f"design|{seed}|{iteration}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _rebuild_batch(state: EvolutionState, pool) -> TaskBatch | None:
    if state.last_batch is None:
        return None
    by_id = {t.task_id: t for t in pool}
    try:
        new = tuple(by_id[tid] for tid in state.last_batch["new"])
        reused = tuple(by_id[tid] for tid in state.last_batch["reused"])
    except KeyError as exc:
        raise EvolutionError(f"resume failed: task {exc} missing from pool") from exc
    return TaskBatch(
        iteration=int(state.last_batch["iteration"]), new_tasks=new, reused_tasks=reused
    )


def evolve_iteration(
    state: EvolutionState,
    task_pool,
    *,
    gateway: Gateway,
    out_dir: str | Path | None = None,
) -> EvolutionState:
    """Run one full inner+outer cycle and advance the state in place."""
    if not state.pending:
        raise EvolutionError("no pending candidates to evaluate")
    k = state.iteration
    cfg = state.config
    batch = compose_batch(
        task_pool, _rebuild_batch(state, task_pool), cfg.n_new, cfg.n_reused, cfg.seed
    )

    results: list[RunResult] = []
    for j, genotype in enumerate(state.pending):
        cand_dir = None
        if out_dir is not None:
            cand_dir = Path(out_dir) / f"iter-{k}" / f"cand-{j}"
        logger.info("iteration %d: evaluating candidate %s", k, genotype.name)
        results.append(
            run_batch(
                genotype,
                batch,
                gateway=gateway,
                mode=cfg.mode,
                seed=cfg.seed,
                out_dir=cand_dir,
            )
        )

    records = rank_candidates(
        [
            CandidateRecord(genotype=r.genotype, summary=r.summary, iteration=k)
            for r in results
        ]
    )
    parents = select_parents(records, cfg.survivors)
    parent_names = {p.genotype.name for p in parents}

    for rec in records:
        state.hash_by_name[rec.genotype.name] = genotype_hash(rec.genotype)
    if out_dir is not None:
        for rec in records:
            lineage = rec.genotype.lineage
            parent_hash = state.hash_by_name.get(lineage[-1]) if lineage else None
            append_jsonl(
                Path(out_dir) / EVOLUTION_LOG,
                {
                    "iteration": k,
                    "candidate": rec.genotype.name,
                    "genotype_hash": genotype_hash(rec.genotype),
                    "parent_hash": parent_hash,
                    "rank": rec.rank,
                    "selected": rec.genotype.name in parent_names,
                    "summary": {
                        "perf_mean": rec.summary.perf_mean,
                        "cost_mean": rec.summary.cost_mean,
                        "delay_mean": rec.summary.delay_mean,
                        "n": rec.summary.n,
                    },
                    "summary_vector": list(rec.vector),
                },
            )

    result_by_name = {r.genotype.name: r for r in results}
    next_pending: list[MemoryGenotype] = []
    if cfg.elitism:
        next_pending.extend(p.genotype for p in parents)
    for parent_rec in parents:
        res = result_by_name[parent_rec.genotype.name]
        profile = diagnose(
            parent_rec, res.trajectories, res.store_snapshot, gateway=gateway
        )
        next_pending.extend(
            design(
                parent_rec,
                profile,
                cfg.descendants,
                proposer=cfg.proposer,
                seed=_design_seed(cfg.seed, k),
                gateway=gateway,
            )
        )

    state.iteration = k + 1
    state.pending = next_pending
    state.candidates = records
    state.parents = sorted(parent_names)
    state.last_batch = {
        "iteration": batch.iteration,
        "new": [t.task_id for t in batch.new_tasks],
        "reused": [t.task_id for t in batch.reused_tasks],
    }
    state.episodes_total += len(batch) * len(results)
    state.candidates_total += len(results)
    return state


def _truncate_audit(out_dir: Path, max_iteration: int) -> None:
    """Drop audit records from iterations that never completed."""
    log_path = out_dir / EVOLUTION_LOG
    if not log_path.exists():
        return
    kept = []
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and json.loads(line)["iteration"] < max_iteration:
                kept.append(line)
    log_path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def run_evolution(
    config: EvolveConfig,
    task_pool,
    *,
    gateway: Gateway,
    out_dir: str | Path,
    resume: bool = True,
) -> tuple[EvolutionState, CandidateRecord]:
    """Drive K_max iterations and return (final state, champion).

    If the output directory holds a state file from an interrupted run, the
    loop resumes from the last completed iteration; otherwise it starts
    fresh from the configured initial candidate (a singleton population).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / STATE_FILE

    if resume and state_path.exists():
        state = EvolutionState.from_dict(read_json(state_path))
        if state.config != config:
            raise EvolutionError(
                f"state in {out_dir} was produced by a different config; "
                "use a fresh output directory"
            )
        logger.info("resuming from iteration %d", state.iteration)
    else:
        state = EvolutionState(config=config, pending=[resolve_initial(config.initial)])
    _truncate_audit(out_dir, state.iteration)

    while state.iteration < config.k_max:
        evolve_iteration(state, task_pool, gateway=gateway, out_dir=out_dir)
        write_json(state_path, state.to_dict())

    if not state.candidates:
        raise EvolutionError("evolution finished without evaluated candidates")
    champion = select_parents(state.candidates, 1)[0]
    save_genotype(champion.genotype, out_dir / CHAMPION_FILE)
    return state, champion
