"""Declarative memory architectures (genotypes).

A genotype fixes the strategy and parameters of each pipeline stage
(encode, store, retrieve, manage) as plain data. Architectures are therefore
searchable: they can be validated, serialized, hashed, mutated, and
instantiated without writing code. Files use the ``.genotype.json``
extension and always carry ``schema_version``.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .carriers import STAGES
from .jsonutil import canonical_dumps, read_json, write_json

SCHEMA_VERSION = 1

ENCODE_STRATEGIES = ("verbatim", "summary", "insight", "workflow", "tips_shortcuts", "tool_synthesis")
SUCCESS_FILTERS = ("all", "success_only", "contrastive")
STORE_STRATEGIES = ("vector_index", "append_log", "keyed_library")
RETRIEVE_STRATEGIES = ("semantic_top_k", "contrastive_pair", "function_match", "return_all")
MANAGE_STRATEGIES = ("none", "dedup", "prune_by_score", "consolidate")

GENOTYPE_SUFFIX = ".genotype.json"


class GenotypeError(Exception):
    pass


@dataclass(frozen=True)
class EncodeSpec:
    strategy: str = "verbatim"
    success_filter: str = "all"
    max_items_per_trajectory: int = 1
    max_chars: int = 2000


@dataclass(frozen=True)
class StoreSpec:
    strategy: str = "vector_index"
    capacity: int | None = None


@dataclass(frozen=True)
class RetrieveSpec:
    strategy: str = "semantic_top_k"
    k: int = 4
    min_score: float = 0.0
    stage_filter: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ManageSpec:
    strategy: str = "none"
    trigger_every: int = 10
    dedup_threshold: float = 0.9
    capacity: int = 50


@dataclass(frozen=True)
class MemoryGenotype:
    name: str
    encode: EncodeSpec = field(default_factory=EncodeSpec)
    store: StoreSpec = field(default_factory=StoreSpec)
    retrieve: RetrieveSpec = field(default_factory=RetrieveSpec)
    manage: ManageSpec = field(default_factory=ManageSpec)
    lineage: tuple[str, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "lineage": list(self.lineage),
            "encode": {
                "strategy": self.encode.strategy,
                "success_filter": self.encode.success_filter,
                "max_items_per_trajectory": self.encode.max_items_per_trajectory,
                "max_chars": self.encode.max_chars,
            },
            "store": {
                "strategy": self.store.strategy,
                "capacity": self.store.capacity,
            },
            "retrieve": {
                "strategy": self.retrieve.strategy,
                "k": self.retrieve.k,
                "min_score": self.retrieve.min_score,
                "stage_filter": list(self.retrieve.stage_filter)
                if self.retrieve.stage_filter is not None
                else None,
            },
            "manage": {
                "strategy": self.manage.strategy,
                "trigger_every": self.manage.trigger_every,
                "dedup_threshold": self.manage.dedup_threshold,
                "capacity": self.manage.capacity,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryGenotype":
        try:
            enc, sto, ret, man = d["encode"], d["store"], d["retrieve"], d["manage"]
            stage_filter = ret.get("stage_filter")
            return cls(
                name=d["name"],
                schema_version=int(d.get("schema_version", -1)),
                lineage=tuple(d.get("lineage", ())),
                encode=EncodeSpec(
                    strategy=enc["strategy"],
                    success_filter=enc.get("success_filter", "all"),
                    max_items_per_trajectory=int(enc.get("max_items_per_trajectory", 1)),
                    max_chars=int(enc.get("max_chars", 2000)),
                ),
                store=StoreSpec(
                    strategy=sto["strategy"],
                    capacity=None if sto.get("capacity") is None else int(sto["capacity"]),
                ),
                retrieve=RetrieveSpec(
                    strategy=ret["strategy"],
                    k=int(ret.get("k", 4)),
                    min_score=float(ret.get("min_score", 0.0)),
                    stage_filter=None if stage_filter is None else tuple(stage_filter),
                ),
                manage=ManageSpec(
                    strategy=man["strategy"],
                    trigger_every=int(man.get("trigger_every", 10)),
                    dedup_threshold=float(man.get("dedup_threshold", 0.9)),
                    capacity=int(man.get("capacity", 50)),
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GenotypeError(f"malformed genotype record: {exc}") from exc


def validate(g: MemoryGenotype) -> list[str]:
    """Return human-readable violations; empty list means valid."""
    v: list[str] = []
    if g.schema_version != SCHEMA_VERSION:
        v.append(f"schema_version {g.schema_version} != supported {SCHEMA_VERSION}")
    if not g.name:
        v.append("name must be non-empty")
    if g.encode.strategy not in ENCODE_STRATEGIES:
        v.append(f"encode.strategy {g.encode.strategy!r} not in {ENCODE_STRATEGIES}")
    if g.encode.success_filter not in SUCCESS_FILTERS:
        v.append(f"encode.success_filter {g.encode.success_filter!r} not in {SUCCESS_FILTERS}")
    if g.encode.max_items_per_trajectory < 1:
        v.append("encode.max_items_per_trajectory must be >= 1")
    if g.encode.max_chars < 1:
        v.append("encode.max_chars must be >= 1")
    if g.store.strategy not in STORE_STRATEGIES:
        v.append(f"store.strategy {g.store.strategy!r} not in {STORE_STRATEGIES}")
    if g.store.capacity is not None and g.store.capacity < 1:
        v.append("store.capacity must be >= 1 or null")
    if g.retrieve.strategy not in RETRIEVE_STRATEGIES:
        v.append(f"retrieve.strategy {g.retrieve.strategy!r} not in {RETRIEVE_STRATEGIES}")
    if g.retrieve.k < 0:
        v.append("retrieve.k must be >= 0")
    if not -1.0 <= g.retrieve.min_score <= 1.0:
        v.append("retrieve.min_score must be within [-1, 1]")
    if g.retrieve.stage_filter is not None:
        bad = [s for s in g.retrieve.stage_filter if s not in STAGES]
        if bad:
            v.append(f"retrieve.stage_filter has unknown stages {bad}")
    if g.manage.strategy not in MANAGE_STRATEGIES:
        v.append(f"manage.strategy {g.manage.strategy!r} not in {MANAGE_STRATEGIES}")
    if g.manage.trigger_every < 1:
        v.append("manage.trigger_every must be >= 1")
    if not -1.0 <= g.manage.dedup_threshold <= 1.0:
        v.append("manage.dedup_threshold must be within [-1, 1]")
    if g.manage.capacity < 1:
        v.append("manage.capacity must be >= 1")
    # Cross-stage coupling: function matching only works against a keyed
    # library, and similarity retrieval needs a store with a text-embedding
    # route (vector index or append log).
    if g.retrieve.strategy == "function_match" and g.store.strategy != "keyed_library":
        v.append("retrieve.strategy function_match requires store.strategy keyed_library")
    if (
        g.retrieve.strategy in ("semantic_top_k", "contrastive_pair")
        and g.store.strategy == "keyed_library"
    ):
        v.append(f"retrieve.strategy {g.retrieve.strategy} requires an embedding-capable store")
    return v


def require_valid(g: MemoryGenotype) -> MemoryGenotype:
    violations = validate(g)
    if violations:
        raise GenotypeError("invalid genotype: " + "; ".join(violations))
    return g


def genotype_hash(g: MemoryGenotype) -> str:
    return hashlib.sha256(canonical_dumps(g.to_dict()).encode("utf-8")).hexdigest()[:16]


def save_genotype(g: MemoryGenotype, path: str | Path) -> Path:
    path = Path(path)
    write_json(path, g.to_dict())
    return path


def load_genotype(path: str | Path) -> MemoryGenotype:
    try:
        data = read_json(path)
    except Exception as exc:
        raise GenotypeError(f"cannot read genotype file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise GenotypeError(f"genotype file {path} does not hold an object")
    return MemoryGenotype.from_dict(data)


def structural_diff(a: MemoryGenotype, b: MemoryGenotype) -> list[str]:
    """Names of stage fields whose values differ (identity fields excluded)."""
    da, db = a.to_dict(), b.to_dict()
    diffs: list[str] = []
    for stage in ("encode", "store", "retrieve", "manage"):
        for key in da[stage]:
            if da[stage][key] != db[stage][key]:
                diffs.append(f"{stage}.{key}")
    return diffs


# The only legal two-field mutation outcomes: a strategy flip plus the one
# coupled repair it forces.
COUPLED_DIFF_PAIRS = (
    frozenset({"retrieve.strategy", "store.strategy"}),
)


# ---------------------------------------------------------------------------
# Presets: one genotype per well-known published memory design, named after
# the system whose encode/store/retrieve/manage combination it reproduces.
# Graph- and hybrid-store systems (g_memory, agent_kb) are approximated on a
# vector index; see README for the catalog. no_memory is the ablation
# baseline: it never surfaces anything (retrieve.k = 0).
# ---------------------------------------------------------------------------

def _p(name, encode, store, retrieve, manage) -> MemoryGenotype:
    return MemoryGenotype(name=name, encode=encode, store=store, retrieve=retrieve, manage=manage)


_PRESETS: dict[str, MemoryGenotype] = {
    g.name: g
    for g in (
        _p(
            "no_memory",
            EncodeSpec("verbatim", "all", 1, 2000),
            StoreSpec("append_log"),
            RetrieveSpec("semantic_top_k", k=0),
            ManageSpec("none"),
        ),
        _p(  # skill library of successful episodes plus distilled tips
            "voyager",
            EncodeSpec("verbatim", "success_only", 3, 4000),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("none"),
        ),
        _p(  # success/failure contrastive insights
            "expel",
            EncodeSpec("insight", "contrastive", 2, 2000),
            StoreSpec("vector_index"),
            RetrieveSpec("contrastive_pair", k=4),
            ManageSpec("none"),
        ),
        _p(  # reflective insights over every episode
            "generative",
            EncodeSpec("insight", "all", 2, 2000),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("none"),
        ),
        _p(  # raw episodic recall
            "dilu",
            EncodeSpec("verbatim", "all", 1, 4000),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("none"),
        ),
        _p(  # workflows induced from successes
            "awm",
            EncodeSpec("workflow", "success_only", 1, 2000),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("none"),
        ),
        _p(  # tips and shortcuts, semantic recall
            "mobile_e",
            EncodeSpec("tips_shortcuts", "all", 3, 1000),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("none"),
        ),
        _p(  # plain JSON cheat sheet scanned semantically
            "cheatsheet",
            EncodeSpec("tips_shortcuts", "all", 3, 1000),
            StoreSpec("append_log"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("none"),
        ),
        _p(  # synthesized tool specs in a keyed library, pruned by utility
            "skillweaver",
            EncodeSpec("tool_synthesis", "success_only", 2, 1500),
            StoreSpec("keyed_library"),
            RetrieveSpec("function_match", k=2, min_score=0.5),
            ManageSpec("prune_by_score", trigger_every=10, capacity=50),
        ),
        _p(  # graph-store design approximated on a vector index; consolidates
            "g_memory",
            EncodeSpec("tips_shortcuts", "all", 3, 1500),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("consolidate", trigger_every=10, dedup_threshold=0.9, capacity=100),
        ),
        _p(  # hybrid-store design approximated on a vector index; dedups
            "agent_kb",
            EncodeSpec("workflow", "all", 2, 2000),
            StoreSpec("vector_index"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("dedup", trigger_every=5, dedup_threshold=0.95),
        ),
        _p(  # procedural workflows with failure-driven pruning
            "memp",
            EncodeSpec("workflow", "all", 2, 2000),
            StoreSpec("append_log"),
            RetrieveSpec("semantic_top_k", k=4),
            ManageSpec("prune_by_score", trigger_every=10, capacity=50),
        ),
        _p(  # distilled experience with contrastive recall and pruning
            "evolver",
            EncodeSpec("tips_shortcuts", "all", 3, 1500),
            StoreSpec("append_log"),
            RetrieveSpec("contrastive_pair", k=4),
            ManageSpec("prune_by_score", trigger_every=10, capacity=50),
        ),
    )
}


def preset_names() -> tuple[str, ...]:
    return tuple(sorted(_PRESETS))


def preset(name: str) -> MemoryGenotype:
    try:
        return _PRESETS[name]
    except KeyError:
        raise GenotypeError(
            f"unknown preset {name!r}; known presets: {', '.join(preset_names())}"
        ) from None


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------

_CAPACITY_CYCLE: tuple[int | None, ...] = (None, 64, 256)
_TRIGGER_CYCLE = (1, 5, 10, 20)
_MANAGE_CAPACITY_CYCLE = (10, 25, 50, 100, 200)

_MAX_ITEMS_CAP = 8
_K_CAP = 16
_MAX_CHARS_LOW, _MAX_CHARS_HIGH = 200, 16000


def _pick_other(rng: random.Random, options, current):
    rest = [o for o in options if o != current]
    return rng.choice(rest)


def _round4(x: float) -> float:
    return round(x, 4)


# Each move: (tag, applicable?, apply). Apply returns a genotype differing in
# exactly the tagged field, before cross-stage repair.
_MOVES: list[tuple[str, Callable, Callable]] = [
    (
        "encode.strategy",
        lambda g: True,
        lambda g, rng: replace(
            g, encode=replace(g.encode, strategy=_pick_other(rng, ENCODE_STRATEGIES, g.encode.strategy))
        ),
    ),
    (
        "encode.success_filter",
        lambda g: True,
        lambda g, rng: replace(
            g,
            encode=replace(
                g.encode, success_filter=_pick_other(rng, SUCCESS_FILTERS, g.encode.success_filter)
            ),
        ),
    ),
    (
        "encode.max_items_up",
        lambda g: g.encode.max_items_per_trajectory < _MAX_ITEMS_CAP,
        lambda g, rng: replace(
            g, encode=replace(g.encode, max_items_per_trajectory=g.encode.max_items_per_trajectory + 1)
        ),
    ),
    (
        "encode.max_items_down",
        lambda g: g.encode.max_items_per_trajectory > 1,
        lambda g, rng: replace(
            g, encode=replace(g.encode, max_items_per_trajectory=g.encode.max_items_per_trajectory - 1)
        ),
    ),
    (
        "encode.max_chars_up",
        lambda g: g.encode.max_chars < _MAX_CHARS_HIGH,
        lambda g, rng: replace(
            g, encode=replace(g.encode, max_chars=min(_MAX_CHARS_HIGH, g.encode.max_chars * 2))
        ),
    ),
    (
        "encode.max_chars_down",
        lambda g: g.encode.max_chars > _MAX_CHARS_LOW,
        lambda g, rng: replace(
            g, encode=replace(g.encode, max_chars=max(_MAX_CHARS_LOW, g.encode.max_chars // 2))
        ),
    ),
    (
        "store.strategy",
        lambda g: True,
        lambda g, rng: replace(
            g, store=replace(g.store, strategy=_pick_other(rng, STORE_STRATEGIES, g.store.strategy))
        ),
    ),
    (
        "store.capacity",
        lambda g: True,
        lambda g, rng: replace(
            g, store=replace(g.store, capacity=_pick_other(rng, _CAPACITY_CYCLE, g.store.capacity))
        ),
    ),
    (
        "retrieve.strategy",
        lambda g: True,
        lambda g, rng: replace(
            g,
            retrieve=replace(
                g.retrieve, strategy=_pick_other(rng, RETRIEVE_STRATEGIES, g.retrieve.strategy)
            ),
        ),
    ),
    (
        "retrieve.k_up",
        lambda g: g.retrieve.k < _K_CAP,
        lambda g, rng: replace(g, retrieve=replace(g.retrieve, k=g.retrieve.k + 1)),
    ),
    (
        "retrieve.k_down",
        lambda g: g.retrieve.k > 0,
        lambda g, rng: replace(g, retrieve=replace(g.retrieve, k=g.retrieve.k - 1)),
    ),
    (
        "retrieve.min_score_up",
        lambda g: g.retrieve.min_score <= 0.9,
        lambda g, rng: replace(
            g, retrieve=replace(g.retrieve, min_score=_round4(g.retrieve.min_score + 0.1))
        ),
    ),
    (
        "retrieve.min_score_down",
        lambda g: g.retrieve.min_score >= -0.9,
        lambda g, rng: replace(
            g, retrieve=replace(g.retrieve, min_score=_round4(g.retrieve.min_score - 0.1))
        ),
    ),
    (
        "manage.strategy",
        lambda g: True,
        lambda g, rng: replace(
            g, manage=replace(g.manage, strategy=_pick_other(rng, MANAGE_STRATEGIES, g.manage.strategy))
        ),
    ),
    (
        "manage.trigger_every",
        lambda g: True,
        lambda g, rng: replace(
            g,
            manage=replace(
                g.manage, trigger_every=_pick_other(rng, _TRIGGER_CYCLE, g.manage.trigger_every)
            ),
        ),
    ),
    (
        "manage.dedup_threshold_up",
        lambda g: g.manage.dedup_threshold <= 0.94,
        lambda g, rng: replace(
            g, manage=replace(g.manage, dedup_threshold=_round4(g.manage.dedup_threshold + 0.05))
        ),
    ),
    (
        "manage.dedup_threshold_down",
        lambda g: g.manage.dedup_threshold >= 0.55,
        lambda g, rng: replace(
            g, manage=replace(g.manage, dedup_threshold=_round4(g.manage.dedup_threshold - 0.05))
        ),
    ),
    (
        "manage.capacity",
        lambda g: True,
        lambda g, rng: replace(
            g,
            manage=replace(
                g.manage, capacity=_pick_other(rng, _MANAGE_CAPACITY_CYCLE, g.manage.capacity)
            ),
        ),
    ),
]

MOVE_TAGS = tuple(tag for tag, _, _ in _MOVES)


def _repair(g: MemoryGenotype, changed_tag: str) -> MemoryGenotype:
    """Fix at most one coupled field after a strategy flip.

    The field that was deliberately mutated is kept; the repair lands on the
    other side of the coupling.
    """
    store_changed = changed_tag.startswith("store.")
    if g.retrieve.strategy == "function_match" and g.store.strategy != "keyed_library":
        if store_changed:
            return replace(g, retrieve=replace(g.retrieve, strategy="semantic_top_k"))
        return replace(g, store=replace(g.store, strategy="keyed_library"))
    if (
        g.retrieve.strategy in ("semantic_top_k", "contrastive_pair")
        and g.store.strategy == "keyed_library"
    ):
        if store_changed:
            return replace(g, retrieve=replace(g.retrieve, strategy="function_match"))
        return replace(g, store=replace(g.store, strategy="vector_index"))
    return g


def _derive_rng(g: MemoryGenotype, seed: int, index: int, salt: int) -> random.Random:
    material = f"{genotype_hash(g)}|{seed}|{index}|{salt}".encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "little"))


def _child_name(g: MemoryGenotype, seed: int, index: int, salt: int) -> str:
    material = f"{genotype_hash(g)}|{seed}|{index}|{salt}|name".encode("utf-8")
    return "g" + hashlib.blake2b(material, digest_size=5).hexdigest()


def mutate(
    g: MemoryGenotype,
    seed: int,
    index: int,
    *,
    move_weights: dict[str, float] | None = None,
    salt: int = 0,
) -> MemoryGenotype:
    """Produce one valid descendant differing from ``g`` in a single field
    (plus at most one coupled repair).

    Deterministic in (genotype, seed, index, salt, move_weights). The weight
    table lets a caller bias which move family is drawn; unweighted calls use
    the uniform menu.
    """
    require_valid(g)
    rng = _derive_rng(g, seed, index, salt)
    menu = [(tag, apply) for tag, ok, apply in _MOVES if ok(g)]
    if move_weights:
        weights = [move_weights.get(tag, 1.0) for tag, _ in menu]
    else:
        weights = [1.0] * len(menu)
    tag, apply = rng.choices(menu, weights=weights, k=1)[0]
    child = _repair(apply(g, rng), tag)
    child = replace(
        child,
        name=_child_name(g, seed, index, salt),
        lineage=g.lineage + (g.name,),
    )
    return require_valid(child)
