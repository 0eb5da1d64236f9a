"""Memory providers: a genotype turned into live encode/store/retrieve/manage
behavior behind one uniform interface.

The provider contract is the integration surface agent harnesses talk to:
``initialize``, ``take_in_memory``, ``provide_memory``, ``manage``, plus the
post-episode ``note_episode_outcome`` credit callback. ``GenotypeProvider``
is the only implementation shipped; its behavior is a pure function of
(genotype, gateway, seed).
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import replace
from pathlib import Path

from .carriers import (
    EMPTY_RESPONSE,
    ITEM_KINDS,
    ManageReport,
    MemoryItem,
    MemoryRequest,
    MemoryResponse,
    TrajectoryData,
)
from .embedding import cosine, embed
from .gateway import Gateway, GatewayError
from .genotype import MemoryGenotype, require_valid
from .jsonutil import append_jsonl
from .prompts import render
from .store import KeyedLibraryStore, item_key, make_store, top_k
from .text import bigram_keys, keys_in

logger = logging.getLogger(__name__)

MANAGE_LOG = "manage.log"

# Similarity floor for pairing a success with a failure of the same flavor.
CONTRASTIVE_PAIR_MIN_SIM = 0.5
_HISTORY_LIMIT = 64

_CONF_SUCCESS = 0.8
_CONF_FAILURE = 0.3
_CONF_CONTRASTIVE = 0.6


class ProviderError(Exception):
    pass


class BaseMemoryProvider(ABC):
    """Contract every memory architecture implements."""

    @abstractmethod
    def initialize(self) -> bool:
        """Prepare (or reload) backing state. Idempotent."""

    @abstractmethod
    def take_in_memory(self, trajectory: TrajectoryData) -> tuple[bool, str]:
        """Ingest one episode. Returns (accepted, machine-parsable description)."""

    @abstractmethod
    def provide_memory(self, request: MemoryRequest) -> MemoryResponse:
        """Surface relevant memory for one step."""

    @abstractmethod
    def manage(self) -> ManageReport:
        """Run one maintenance pass. Store size never increases."""

    def note_episode_outcome(self, provided_ids, success: bool) -> None:
        """Post-episode credit assignment hook; default no-op."""

    def snapshot(self) -> tuple[MemoryItem, ...]:
        return ()

    def save(self) -> None:
        pass


def render_trajectory(traj: TrajectoryData, max_chars: int) -> str:
    """Plain-text episode record.

    The first line of a solved episode repeats the winning action so that
    downstream consumers (retrieval hints, diagnostics) find the decisive
    tool name before any exploration noise.
    """
    lines = []
    if traj.success and traj.steps:
        last = traj.steps[-1]
        lines.append(f"solved {traj.task_id} via {last.action} -> {last.observation}")
    else:
        lines.append(f"unsolved {traj.task_id} (reward {traj.reward:g})")
    lines.append(f"query: {traj.query}")
    lines.extend(f"[{s.index}] {s.action} -> {s.observation}" for s in traj.steps)
    return "\n".join(lines)[:max_chars]


def describe_items(items) -> str:
    """Machine-parsable ingest description, e.g. '1 raw_trajectory item'."""
    if not items:
        return "0 items"
    counts: dict[str, int] = {}
    for item in items:
        counts[item.kind] = counts.get(item.kind, 0) + 1
    parts = []
    for kind in ITEM_KINDS:
        n = counts.get(kind, 0)
        if n:
            parts.append(f"{n} {kind} item" + ("s" if n > 1 else ""))
    return ", ".join(parts)


def _parse_noted_lines(text: str, default_kind: str, limit: int) -> list[tuple[str, str]]:
    """Turn 'tip: ...' style response lines into (kind, content) drafts."""
    prefix_kinds = {"tip": "tip", "shortcut": "shortcut", "insight": "insight", "workflow": "workflow"}
    drafts: list[tuple[str, str]] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        head, _, _ = line.partition(":")
        kind = prefix_kinds.get(head.strip().casefold(), default_kind)
        drafts.append((kind, line))
        if len(drafts) >= limit:
            break
    return drafts


class GenotypeProvider(BaseMemoryProvider):
    """The declarative pipeline: strategies are looked up from the genotype,
    never hard-coded per architecture."""

    def __init__(
        self,
        genotype: MemoryGenotype,
        gateway: Gateway,
        *,
        seed: int = 0,
        storage_dir: str | Path | None = None,
    ) -> None:
        require_valid(genotype)
        self.genotype = genotype
        self.gateway = gateway
        self.seed = seed
        self.storage_dir = Path(storage_dir) if storage_dir is not None else None
        self._store = make_store(genotype.store.strategy, genotype.store.capacity)
        self._ingest_counter = 0
        self._mint_counter = 0
        self._history: deque[TrajectoryData] = deque(maxlen=_HISTORY_LIMIT)
        self._initialized = False

    # -- lifecycle ---------------------------------------------------------

    @property
    def ingest_counter(self) -> int:
        return self._ingest_counter

    def initialize(self) -> bool:
        if self.storage_dir is not None:
            self.storage_dir.mkdir(parents=True, exist_ok=True)
            self._store.load(self.storage_dir)  # raises StoreError naming the file
        steps = [item.created_at_step for item in self._store.items()]
        self._ingest_counter = max(steps, default=0)
        self._history.clear()
        self._initialized = True
        return True

    def save(self) -> None:
        if self.storage_dir is not None:
            self._store.save(self.storage_dir)

    def snapshot(self) -> tuple[MemoryItem, ...]:
        return self._store.items()

    def __len__(self) -> int:
        return len(self._store)

    def _require_ready(self) -> None:
        if not self._initialized:
            raise ProviderError("provider used before initialize()")

    # -- encode ------------------------------------------------------------

    def _complete(self, tag: str, template: str, **fields: str) -> str:
        text, _ = self.gateway.complete(render(template, **fields), tag=tag)
        return text

    def _encode(self, traj: TrajectoryData) -> list[tuple[str, str, float]]:
        enc = self.genotype.encode
        base_conf = _CONF_SUCCESS if traj.success else _CONF_FAILURE
        rendered = render_trajectory(traj, enc.max_chars)
        budget = enc.max_items_per_trajectory

        if enc.strategy == "verbatim":
            drafts = [("raw_trajectory", rendered, base_conf)]
            if budget > 1:
                text = self._complete("encode.tips", "encode_tips",
                                      trajectory=rendered, max_items=str(budget - 1))
                drafts += [(k, c, base_conf) for k, c in _parse_noted_lines(text, "tip", budget - 1)]
            return drafts

        if enc.strategy == "summary":
            text = self._complete("encode.summary", "encode_summary", trajectory=rendered)
            return [("raw_trajectory", text.strip(), base_conf)]

        if enc.strategy == "insight":
            text = self._complete("encode.insight", "encode_insight",
                                  trajectory=rendered, max_items=str(budget))
            return [(k, c, base_conf) for k, c in _parse_noted_lines(text, "insight", budget)]

        if enc.strategy == "tips_shortcuts":
            text = self._complete("encode.tips", "encode_tips",
                                  trajectory=rendered, max_items=str(budget))
            return [(k, c, base_conf) for k, c in _parse_noted_lines(text, "tip", budget)]

        if enc.strategy == "workflow":
            text = self._complete("encode.workflow", "encode_workflow", trajectory=rendered)
            drafts = _parse_noted_lines(text, "workflow", budget)
            return [("workflow", c, base_conf) for _, c in drafts]

        if enc.strategy == "tool_synthesis":
            text = self._complete("encode.tool", "encode_tool",
                                  trajectory=rendered, max_items=str(budget))
            drafts = []
            for line in text.splitlines():
                line = line.strip()
                if line:
                    drafts.append(("tool_spec", line, base_conf))
                if len(drafts) >= budget:
                    break
            return drafts

        raise ProviderError(f"unknown encode strategy {enc.strategy!r}")

    def _encode_contrastive(
        self, traj: TrajectoryData, mate: TrajectoryData
    ) -> list[tuple[str, str, float]]:
        enc = self.genotype.encode
        success_traj, failure_traj = (traj, mate) if traj.success else (mate, traj)
        text = self._complete(
            "encode.insight",
            "encode_insight_contrastive",
            success_trajectory=render_trajectory(success_traj, enc.max_chars),
            failure_trajectory=render_trajectory(failure_traj, enc.max_chars),
            max_items=str(enc.max_items_per_trajectory),
        )
        drafts = _parse_noted_lines(text, "insight", enc.max_items_per_trajectory)
        return [(k, c, _CONF_CONTRASTIVE) for k, c in drafts]

    def _find_contrastive_mate(self, traj: TrajectoryData) -> TrajectoryData | None:
        query_vec = embed(traj.query)
        best: tuple[float, TrajectoryData] | None = None
        for past in reversed(self._history):
            if past.success == traj.success:
                continue
            sim = cosine(query_vec, embed(past.query))
            if sim >= CONTRASTIVE_PAIR_MIN_SIM and (best is None or sim > best[0]):
                best = (sim, past)
        return best[1] if best else None

    def take_in_memory(self, trajectory: TrajectoryData) -> tuple[bool, str]:
        self._require_ready()
        enc = self.genotype.encode
        try:
            if enc.success_filter == "success_only" and not trajectory.success:
                drafts = []
            elif enc.success_filter == "contrastive":
                mate = self._find_contrastive_mate(trajectory)
                drafts = [] if mate is None else self._encode_contrastive(trajectory, mate)
            else:
                drafts = self._encode(trajectory)
        except GatewayError as exc:
            self._history.append(trajectory)
            return False, f"encode failed: {exc}"

        self._history.append(trajectory)
        self._ingest_counter += 1
        step = self._ingest_counter
        items = self._stage_items(drafts, trajectory, step)
        for item in items:
            self._store.upsert(item)
        if (
            self.genotype.manage.strategy != "none"
            and step % self.genotype.manage.trigger_every == 0
        ):
            self.manage()
        return True, describe_items(items)

    def _stage_items(self, drafts, trajectory: TrajectoryData, step: int) -> list[MemoryItem]:
        enc = self.genotype.encode
        items: list[MemoryItem] = []
        seen_keys: dict[str, int] = {}
        for i, (kind, content, conf) in enumerate(drafts):
            content = content[: enc.max_chars]
            if not content:
                continue
            item = MemoryItem(
                id=f"m{step:06d}.{i}",
                kind=kind,
                content=content,
                source_task_id=trajectory.task_id,
                created_at_step=step,
                confidence=conf,
            )
            if isinstance(self._store, KeyedLibraryStore):
                key = item_key(item)
                if key in seen_keys:
                    continue  # duplicate key within one ingest: keep the first
                seen_keys[key] = i
                holder_id = self._store.id_for_key(key)
                if holder_id is not None:
                    # Same key resurfacing refreshes the existing entry
                    # in place, carrying its usage statistics forward.
                    prior = self._store.get(holder_id)
                    item = replace(
                        item,
                        id=holder_id,
                        hit_count=prior.hit_count,
                        success_assoc=prior.success_assoc,
                    )
            items.append(item)
        return items

    # -- retrieve ----------------------------------------------------------

    def provide_memory(self, request: MemoryRequest) -> MemoryResponse:
        self._require_ready()
        if request.max_items < 0:
            raise ProviderError("max_items must be >= 0")
        ret = self.genotype.retrieve
        if ret.stage_filter is not None and request.stage not in ret.stage_filter:
            return EMPTY_RESPONSE
        if len(self._store) == 0:
            return EMPTY_RESPONSE

        if ret.strategy == "return_all":
            limit = request.max_items
        else:
            limit = min(ret.k, request.max_items)
        if limit <= 0:
            return EMPTY_RESPONSE

        if ret.strategy == "semantic_top_k":
            ranked = top_k(self._store, embed(request.query), limit)
            ranked = [(it, sc) for it, sc in ranked if sc >= ret.min_score]
        elif ret.strategy == "contrastive_pair":
            ranked = self._retrieve_contrastive(request.query, limit, ret.min_score)
        elif ret.strategy == "function_match":
            ranked = self._retrieve_function_match(request.query, limit)
        elif ret.strategy == "return_all":
            ranked = [(item, 1.0) for item in self._store.items()[:limit]]
        else:
            raise ProviderError(f"unknown retrieve strategy {ret.strategy!r}")

        if not ranked:
            return EMPTY_RESPONSE
        items = tuple(it for it, _ in ranked)
        self._store.mark_hits([it.id for it in items])
        return MemoryResponse(
            items=items,
            scores=tuple(sc for _, sc in ranked),
            rationale=ret.strategy,
        )

    def _retrieve_contrastive(self, query: str, limit: int, min_score: float):
        """Balanced recall: alternate between items minted from successes
        (confidence >= 0.5) and from failures, each pool ranked by cosine."""
        qvec = embed(query)
        scored = [(item, cosine(qvec, self._store.vector_for(item))) for item in self._store.items()]
        scored = [(it, sc) for it, sc in scored if sc >= min_score]
        order = lambda pair: (-pair[1], pair[0].created_at_step, pair[0].id)  # noqa: E731
        hi = sorted((p for p in scored if p[0].confidence >= 0.5), key=order)
        lo = sorted((p for p in scored if p[0].confidence < 0.5), key=order)
        picked = []
        pools = [hi, lo]
        idx = [0, 0]
        turn = 0
        while len(picked) < limit and (idx[0] < len(hi) or idx[1] < len(lo)):
            pool = pools[turn % 2]
            slot = turn % 2
            if idx[slot] < len(pool):
                picked.append(pool[idx[slot]])
                idx[slot] += 1
            turn += 1
        picked.sort(key=order)
        return picked

    def _retrieve_function_match(self, query: str, limit: int):
        """Exact identifier matching against the keyed library. Queries may
        spell keys as words, so adjacent-token joins are matched too."""
        assert isinstance(self._store, KeyedLibraryStore)
        allowed = set(self._store.keys())
        ordered = keys_in(query, allowed)
        for joined in bigram_keys(query):
            if joined in allowed and joined not in ordered:
                ordered.append(joined)
        ranked = []
        for key in ordered[:limit]:
            item = self._store.get(self._store.id_for_key(key))
            if item is not None:
                ranked.append((item, 1.0))
        return ranked

    # -- manage ------------------------------------------------------------

    def manage(self) -> ManageReport:
        self._require_ready()
        man = self.genotype.manage
        if man.strategy == "none":
            report = ManageReport()
        elif man.strategy == "dedup":
            report = self._manage_dedup(man.dedup_threshold)
        elif man.strategy == "prune_by_score":
            report = self._manage_prune(man.capacity)
        elif man.strategy == "consolidate":
            report = self._manage_consolidate(man.dedup_threshold)
        else:
            raise ProviderError(f"unknown manage strategy {man.strategy!r}")
        self._log_manage(report, man.strategy)
        return report

    def _age_order(self):
        return sorted(self._store.items(), key=lambda m: (m.created_at_step, m.id))

    def _manage_dedup(self, threshold: float) -> ManageReport:
        survivors: list[MemoryItem] = []
        doomed: list[str] = []
        for item in self._age_order():
            vec = self._store.vector_for(item)
            if any(cosine(vec, self._store.vector_for(s)) >= threshold for s in survivors):
                doomed.append(item.id)
            else:
                survivors.append(item)
        self._store.remove(doomed)
        return ManageReport(deduplicated=len(doomed))

    @staticmethod
    def utility(item: MemoryItem) -> float:
        """Retention score for pruning: earned usage first, then confidence."""
        return 2.0 * item.success_assoc + 1.0 * item.hit_count + item.confidence

    def _manage_prune(self, capacity: int) -> ManageReport:
        excess = len(self._store) - capacity
        if excess <= 0:
            return ManageReport()
        ranked = sorted(
            self._store.items(),
            key=lambda m: (self.utility(m), m.created_at_step, m.id),
        )
        doomed = [m.id for m in ranked[:excess]]
        self._store.remove(doomed)
        return ManageReport(pruned=len(doomed))

    def _manage_consolidate(self, threshold: float) -> ManageReport:
        clusters: list[list[MemoryItem]] = []
        for item in self._age_order():
            vec = self._store.vector_for(item)
            for cluster in clusters:
                if cosine(vec, self._store.vector_for(cluster[0])) >= threshold:
                    cluster.append(item)
                    break
            else:
                clusters.append([item])
        merged_sources = 0
        minted: list[tuple[str, tuple[str, ...]]] = []
        for cluster in clusters:
            if len(cluster) < 2:
                continue
            kinds = {m.kind for m in cluster}
            self._mint_counter += 1
            merged = MemoryItem(
                id=f"c{self._mint_counter:06d}",
                kind=cluster[0].kind if len(kinds) == 1 else "insight",
                content="\n---\n".join(m.content for m in cluster)[: self.genotype.encode.max_chars],
                source_task_id=cluster[0].source_task_id,
                created_at_step=self._ingest_counter,
                confidence=max(m.confidence for m in cluster),
                hit_count=sum(m.hit_count for m in cluster),
                success_assoc=sum(m.success_assoc for m in cluster),
            )
            self._store.remove([m.id for m in cluster])
            self._store.upsert(merged)
            merged_sources += len(cluster)
            minted.append((merged.id, tuple(m.id for m in cluster)))
        return ManageReport(merged=merged_sources, minted=tuple(minted))

    def _log_manage(self, report: ManageReport, strategy: str) -> None:
        if self.storage_dir is None:
            return
        record = {"strategy": strategy, "ingest_counter": self._ingest_counter}
        record.update(report.to_dict())
        append_jsonl(self.storage_dir / MANAGE_LOG, record)

    # -- credit ------------------------------------------------------------

    def note_episode_outcome(self, provided_ids, success: bool) -> None:
        if success:
            self._store.credit_success(provided_ids)


def instantiate(
    genotype: MemoryGenotype,
    gateway: Gateway,
    *,
    seed: int = 0,
    storage_dir: str | Path | None = None,
) -> GenotypeProvider:
    """Validated construction; raises GenotypeError on an invalid genotype."""
    return GenotypeProvider(genotype, gateway, seed=seed, storage_dir=storage_dir)
