"""Store backends: vector index, append log, and keyed library.

All three hold immutable MemoryItems in insertion order and differ only in
the extra index they maintain (an embedding per item, nothing, or a derived
string key per item). Persistence is one JSONL file for items plus, for the
vector index, a binary vector file with a sidecar id manifest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .carriers import MemoryItem, with_hit, with_success
from .embedding import DIM, cosine, embed
from .jsonutil import read_jsonl, write_jsonl
from .text import tokenize

STORE_KINDS = ("vector_index", "append_log", "keyed_library")

VECTORS_FILE = "vectors.bin"
VECTORS_MANIFEST = "vectors.manifest"


class StoreError(Exception):
    pass


def item_key(item: MemoryItem) -> str:
    """Derived library key: first token of the first content line."""
    first_line = item.content.splitlines()[0]
    toks = tokenize(first_line)
    if not toks:
        raise StoreError(f"item {item.id} has no tokenizable key")
    return toks[0]


class MemoryStore:
    """Base store: insertion-ordered id -> item map with a capacity bound.

    The capacity bound is a hard ring buffer: inserting into a full store
    evicts the oldest item (smallest created_at_step, then id). Utility-aware
    forgetting belongs to the manage stage, not here.
    """

    kind = "append_log"

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise StoreError("capacity must be >= 1 or None")
        self.capacity = capacity
        self._items: dict[str, MemoryItem] = {}

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._items

    def get(self, item_id: str) -> MemoryItem | None:
        return self._items.get(item_id)

    def items(self) -> tuple[MemoryItem, ...]:
        return tuple(self._items.values())

    def upsert(self, item: MemoryItem) -> None:
        replacing = item.id in self._items
        self._set(item)
        if not replacing and self.capacity is not None:
            while len(self._items) > self.capacity:
                oldest = min(self._items.values(), key=lambda m: (m.created_at_step, m.id))
                self.remove([oldest.id])

    def remove(self, ids) -> int:
        removed = 0
        for item_id in list(ids):
            if item_id in self._items:
                self._drop(item_id)
                removed += 1
        return removed

    def mark_hits(self, ids) -> None:
        for item_id in ids:
            item = self._items.get(item_id)
            if item is not None:
                self._items[item_id] = with_hit(item)

    def credit_success(self, ids) -> None:
        for item_id in set(ids):
            item = self._items.get(item_id)
            if item is not None:
                self._items[item_id] = with_success(item)

    def vector_for(self, item: MemoryItem) -> np.ndarray:
        return embed(item.content)

    # hooks
    def _set(self, item: MemoryItem) -> None:
        self._items[item.id] = item

    def _drop(self, item_id: str) -> None:
        del self._items[item_id]

    # persistence
    def save(self, directory: str | Path, filename: str = "memory.jsonl") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / filename
        write_jsonl(path, (item.to_dict() for item in self._items.values()))
        return path

    def load(self, directory: str | Path, filename: str = "memory.jsonl") -> int:
        """Replace contents from disk; returns the number of items loaded."""
        path = Path(directory) / filename
        self._items.clear()
        self._post_clear()
        if not path.exists():
            return 0
        try:
            for record in read_jsonl(path):
                self._set(MemoryItem.from_dict(record))
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreError(f"corrupt memory store file {path}: {exc}") from exc
        return len(self._items)

    def _post_clear(self) -> None:
        pass


class AppendLogStore(MemoryStore):
    kind = "append_log"


class VectorIndexStore(MemoryStore):
    """Store with one embedding per item, persisted to vectors.bin."""

    kind = "vector_index"

    def __init__(self, capacity: int | None = None):
        super().__init__(capacity)
        self._vectors: dict[str, np.ndarray] = {}

    def vector_for(self, item: MemoryItem) -> np.ndarray:
        vec = self._vectors.get(item.id)
        return vec if vec is not None else embed(item.content)

    def _set(self, item: MemoryItem) -> None:
        prior = self._items.get(item.id)
        if prior is None or prior.content != item.content:
            self._vectors[item.id] = embed(item.content)
        super()._set(item)

    def _drop(self, item_id: str) -> None:
        super()._drop(item_id)
        self._vectors.pop(item_id, None)

    def _post_clear(self) -> None:
        self._vectors.clear()

    def save(self, directory: str | Path, filename: str = "memory.jsonl") -> Path:
        path = super().save(directory, filename)
        directory = Path(directory)
        ids = list(self._items.keys())
        with open(directory / VECTORS_FILE, "wb") as fh:
            fh.write(struct.pack("<I", DIM))
            for item_id in ids:
                fh.write(self._vectors[item_id].astype("<f8").tobytes())
        (directory / VECTORS_MANIFEST).write_text(
            "".join(f"{item_id}\n" for item_id in ids), encoding="utf-8"
        )
        return path

    def load(self, directory: str | Path, filename: str = "memory.jsonl") -> int:
        count = super().load(directory, filename)
        directory = Path(directory)
        vec_path = directory / VECTORS_FILE
        man_path = directory / VECTORS_MANIFEST
        if vec_path.exists() and man_path.exists():
            ids = man_path.read_text(encoding="utf-8").split()
            raw = vec_path.read_bytes()
            if len(raw) < 4:
                raise StoreError(f"corrupt memory store file {vec_path}: truncated header")
            (dim,) = struct.unpack("<I", raw[:4])
            body = raw[4:]
            if dim != DIM or len(body) != len(ids) * dim * 8:
                raise StoreError(f"corrupt memory store file {vec_path}: size mismatch")
            if set(ids) != set(self._items.keys()):
                raise StoreError(f"corrupt memory store file {vec_path}: manifest mismatch")
            mat = np.frombuffer(body, dtype="<f8").reshape(len(ids), dim)
            for pos, item_id in enumerate(ids):
                vec = mat[pos].copy()
                vec.setflags(write=False)
                self._vectors[item_id] = vec
        return count


class KeyedLibraryStore(MemoryStore):
    """Store indexed by a derived string key (one item per key)."""

    kind = "keyed_library"

    def __init__(self, capacity: int | None = None):
        super().__init__(capacity)
        self._key_to_id: dict[str, str] = {}

    def id_for_key(self, key: str) -> str | None:
        return self._key_to_id.get(key)

    def keys(self) -> tuple[str, ...]:
        return tuple(self._key_to_id.keys())

    def _set(self, item: MemoryItem) -> None:
        key = item_key(item)
        holder = self._key_to_id.get(key)
        if holder is not None and holder != item.id:
            raise StoreError(f"key collision on {key!r}: held by {holder}, got {item.id}")
        prior = self._items.get(item.id)
        if prior is not None:
            old_key = item_key(prior)
            if old_key != key:
                del self._key_to_id[old_key]
        self._key_to_id[key] = item.id
        super()._set(item)

    def _drop(self, item_id: str) -> None:
        item = self._items[item_id]
        self._key_to_id.pop(item_key(item), None)
        super()._drop(item_id)

    def _post_clear(self) -> None:
        self._key_to_id.clear()


def make_store(kind: str, capacity: int | None = None) -> MemoryStore:
    if kind == "vector_index":
        return VectorIndexStore(capacity)
    if kind == "append_log":
        return AppendLogStore(capacity)
    if kind == "keyed_library":
        return KeyedLibraryStore(capacity)
    raise StoreError(f"unknown store kind {kind!r}")


def top_k(store: MemoryStore, query_vec: np.ndarray, k: int) -> list[tuple[MemoryItem, float]]:
    """Exact exhaustive top-k by cosine.

    Ties break toward the smaller created_at_step, then lexicographic id,
    giving a total order; consequently top_k(k) is always a prefix of
    top_k(k+1).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0 or len(store) == 0:
        return []
    scored = [(item, cosine(query_vec, store.vector_for(item))) for item in store.items()]
    scored.sort(key=lambda pair: (-pair[1], pair[0].created_at_step, pair[0].id))
    return scored[:k]
