from __future__ import annotations

import logging
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..errors import AbortedRun, EmptyInput
from .types import ChunkResult, EndpointConfig, ItemError, TokenUsage

log = logging.getLogger(__name__)


@dataclass
class BatchRun:
    """Per-item results in input order; failed items hold an ``ItemError``."""

    results: list
    usage: TokenUsage = field(default_factory=TokenUsage)
    n_chunks: int = 0

    @property
    def errors(self) -> list[ItemError]:
        return [r for r in self.results if isinstance(r, ItemError)]

    @property
    def successes(self) -> list:
        return [r for r in self.results if not isinstance(r, ItemError)]

    @property
    def ok(self) -> bool:
        return not self.errors


def _item_id(item) -> str:
    return getattr(item, "id", None) or getattr(item, "item_id", None) or str(item)


def chunked(items: Sequence, size: int) -> list[list]:
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    return [list(items[i:i + size]) for i in range(0, len(items), size)]


def run_batched(
    items: Sequence,
    config: EndpointConfig,
    op: Callable[[Sequence], ChunkResult],
    fail_fast: bool = False,
    max_in_flight: int | None = None,
) -> BatchRun:
    """Apply a chunk operation to ``items`` in chunks of ``config.batch_size``.

    ``op`` receives a list of items and returns a ``ChunkResult`` with one
    outcome per item (a value or an exception); if it raises, every item in
    the chunk is recorded as failed. At most ``max_in_flight`` chunks run
    concurrently. Output order always follows input order. With ``fail_fast``
    the first failure, in input order among finished chunks, raises
    ``AbortedRun`` and no further chunks are started.
    """
    if not items:
        raise EmptyInput("run_batched needs at least one item")
    chunks = chunked(list(items), config.batch_size)
    workers = max_in_flight or config.max_in_flight
    offsets = [sum(len(c) for c in chunks[:k]) for k in range(len(chunks))]
    results: list = [None] * len(items)
    usages: list[TokenUsage] = [TokenUsage()] * len(chunks)

    def settle(k: int, outcome: ChunkResult | BaseException) -> ItemError | None:
        chunk, base = chunks[k], offsets[k]
        first_error = None
        if isinstance(outcome, BaseException):
            outs: list = [outcome] * len(chunk)
        else:
            outs = list(outcome.outcomes)
            usages[k] = outcome.usage
            if len(outs) != len(chunk):
                raise RuntimeError(f"chunk operation returned {len(outs)} outcomes for {len(chunk)} items")
        for j, (item, out) in enumerate(zip(chunk, outs)):
            if isinstance(out, BaseException):
                out = ItemError(_item_id(item), out, base + j)
                log.warning("item %s failed: %s", out.item_id, out.error)
                first_error = first_error or out
            results[base + j] = out
        return first_error

    def call(k: int):
        try:
            return op(chunks[k])
        except Exception as exc:  # recorded per item
            return exc

    if workers <= 1:
        for k in range(len(chunks)):
            err = settle(k, call(k))
            if err and fail_fast:
                raise AbortedRun(err.item_id, err.error)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = {}
            next_k = 0
            abort: ItemError | None = None
            while next_k < len(chunks) or pending:
                while abort is None and next_k < len(chunks) and len(pending) < workers:
                    pending[pool.submit(call, next_k)] = next_k
                    next_k += 1
                if not pending:
                    break
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=pending.get):
                    k = pending.pop(fut)
                    err = settle(k, fut.result())
                    if err and fail_fast and (abort is None or err.index < abort.index):
                        abort = err
            if abort is not None:
                raise AbortedRun(abort.item_id, abort.error)

    total = TokenUsage()
    for u in usages:
        total = total + u
    return BatchRun(results, total, len(chunks))
