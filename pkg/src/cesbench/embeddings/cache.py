"""Persistent embedding cache.

Layout under the cache directory::

    index.jsonl   one JSON object per stored vector: key, offset, dims, model_id, ...
    vectors.bin   append-only log of little-endian float64 values

Later index lines for a key supersede earlier ones, which is how ``repair``
replaces a corrupt record without rewriting the log.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from ..dataset import ImageRecord
from ..errors import CacheCorrupt
from .vectors import EmbeddingVector

log = logging.getLogger(__name__)

_DTYPE = np.dtype("<f8")


def cache_key(item_id: str, model_id: str, modality: str, tag: str = "") -> str:
    payload = json.dumps([item_id, model_id, modality, tag], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class _Entry:
    offset: int
    dims: int
    item_id: str
    model_id: str
    modality: str
    sha256: str


class EmbeddingCache:
    def __init__(self, root: str | Path, strict: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.strict = strict
        self.index_path = self.root / "index.jsonl"
        self.log_path = self.root / "vectors.bin"
        self._index: dict[str, _Entry] = {}
        self._write_lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()
        self._load_index()

    def _load_index(self):
        if not self.index_path.exists():
            return
        with open(self.index_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    self._index[obj["key"]] = _Entry(
                        int(obj["offset"]), int(obj["dims"]), obj["item_id"],
                        obj["model_id"], obj["modality"], obj["sha256"],
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    log.warning("skipping unreadable cache index line %d", lineno)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def get(self, key: str) -> EmbeddingVector | None:
        entry = self._index.get(key)
        if entry is None:
            return None
        nbytes = entry.dims * _DTYPE.itemsize
        try:
            with open(self.log_path, "rb") as fh:
                fh.seek(entry.offset)
                raw = fh.read(nbytes)
        except FileNotFoundError:
            raise CacheCorrupt(key, "vector log missing") from None
        if len(raw) != nbytes:
            raise CacheCorrupt(key, "truncated record")
        if hashlib.sha256(raw).hexdigest() != entry.sha256:
            raise CacheCorrupt(key)
        values = np.frombuffer(raw, dtype=_DTYPE)
        if not np.all(np.isfinite(values)):
            raise CacheCorrupt(key, "non-finite values")
        return EmbeddingVector(entry.item_id, entry.modality, entry.model_id, values)

    def put(self, key: str, vector: EmbeddingVector) -> None:
        raw = np.ascontiguousarray(vector.values, dtype=_DTYPE).tobytes()
        with self._write_lock:
            with open(self.log_path, "ab") as fh:
                fh.seek(0, os.SEEK_END)
                offset = fh.tell()
                fh.write(raw)
            entry = _Entry(offset, vector.dims, vector.item_id, vector.model_id,
                           vector.modality, hashlib.sha256(raw).hexdigest())
            with open(self.index_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, **entry.__dict__}) + "\n")
            self._index[key] = entry

    def _lock_for(self, key: str) -> threading.Lock:
        with self._key_locks_guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def get_or_compute(
        self,
        key: str,
        compute: Callable[[], EmbeddingVector],
        repair: bool = False,
    ) -> EmbeddingVector:
        """Return the cached vector for ``key``, computing it at most once.

        Concurrent callers for the same key wait on one computation. A corrupt
        record raises ``CacheCorrupt`` unless ``repair`` is set, in which case
        the vector is recomputed and re-appended.
        """
        with self._lock_for(key):
            try:
                hit = self.get(key)
            except CacheCorrupt:
                if not repair:
                    raise
                log.warning("recomputing corrupt cache record %s", key[:16])
                hit = None
            if hit is not None:
                return hit
            vector = compute()
            self.put(key, vector)
            return self.get(key)


class Embedder(Protocol):
    model_id: str
    modality: str

    def embed(self, item) -> EmbeddingVector: ...


def content_id(item: ImageRecord | str) -> str:
    if isinstance(item, str):
        return "sha256:" + hashlib.sha256(item.encode("utf-8")).hexdigest()
    path = Path(item.source)
    if path.is_file():
        return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()
    return "sha256:" + hashlib.sha256(item.source.encode("utf-8")).hexdigest()


def cache_get_or_compute(
    cache: EmbeddingCache,
    item: ImageRecord | str,
    producer: Embedder,
    tag: str = "",
    repair: bool = False,
) -> EmbeddingVector:
    """Embed ``item`` through ``producer``, consulting ``cache`` first.

    Records are keyed by their id; text items by their content. In strict
    cache mode image records are keyed by file content instead.
    """
    if isinstance(item, str):
        ident = content_id(item)
    else:
        ident = content_id(item) if cache.strict else item.id
    key = cache_key(ident, producer.model_id, producer.modality, tag)
    return cache.get_or_compute(key, lambda: producer.embed(item), repair=repair)
