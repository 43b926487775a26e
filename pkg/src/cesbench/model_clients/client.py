"""HTTP client for chat-completions style and embedding endpoints.

Images travel as base64 data URLs inside chat messages. A multi-image
request (sync batch mode) asks for one ``<n>: <answer>`` line per image; in
async batch mode a chunk is submitted as a job of single-image requests and
polled until complete.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import random
import re
import threading
import time
from pathlib import Path
from typing import Callable, Sequence

import httpx

from ..dataset import ImageRecord
from ..embeddings.vectors import EmbeddingVector
from ..errors import (
    DimensionMismatch,
    EmptyInput,
    EmptyResponse,
    ImageUnreadable,
    RateLimited,
    TransportError,
)
from ..prompting import CAPTION_INSTRUCTION, CLUSTER_MAPPING, join_classes
from .ratelimit import RateLimiter
from .types import Caption, ChunkResult, EndpointConfig, RawModelResponse, TokenUsage

log = logging.getLogger(__name__)

PASSTHROUGH_SCHEMES = ("http://", "https://", "data:", "mock://")
BATCH_SUFFIX = (
    "\n\nYou will receive {n} images, numbered 1 to {n}. "
    "Answer for every image on its own line, formatted as '<number>: <answer>'."
)
_LINE_RE = re.compile(r"^\s*(?:image\s*)?(\d+)\s*[:.)\-]\s*(.*?)\s*$", re.IGNORECASE)


def encode_image(item: ImageRecord) -> str:
    """Return the transport form of an image: a URL or a base64 data URL."""
    src = item.source
    if src.startswith(PASSTHROUGH_SCHEMES):
        return src
    path = Path(src)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageUnreadable(f"{item.id}: cannot read {src} ({exc.strerror or exc})") from None
    if not data:
        raise ImageUnreadable(f"{item.id}: {src} is empty")
    mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


def parse_numbered_lines(text: str, n: int) -> dict[int, str]:
    """Map 1-based image numbers to answers; first occurrence wins."""
    out: dict[int, str] = {}
    for line in text.splitlines():
        m = _LINE_RE.match(line)
        if m:
            k = int(m.group(1))
            if 1 <= k <= n and k not in out and m.group(2):
                out[k] = m.group(2)
    return out


def _usage_from(data: dict) -> tuple[int, int]:
    u = data.get("usage") or {}
    i = u.get("prompt_tokens", u.get("input_tokens", 0))
    o = u.get("completion_tokens", u.get("output_tokens", 0))
    return int(i or 0), int(o or 0)


def _message_text(data: dict) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return ""
    if isinstance(content, list):  # some servers return content parts
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return content or ""


class ModelClient:
    """Client for one endpoint; safe to share across worker threads."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        *,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        request_log: str | Path | None = None,
        seed: int = 0,
    ):
        self.config = config
        self.clock = clock
        self.sleep = sleep
        self.limiter = RateLimiter(config.requests_per_minute, 60.0, clock, sleep)
        headers = {"Content-Type": "application/json"}
        key = config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(base_url=config.base_url, transport=transport,
                                  timeout=config.timeout, headers=headers)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._usage = TokenUsage()
        self._log_path = Path(request_log) if request_log else None

    # -- bookkeeping -----------------------------------------------------

    @property
    def usage(self) -> TokenUsage:
        """Everything this client has consumed, retries included."""
        return self._usage

    @property
    def model_id(self) -> str:
        return self.config.model_id

    def _account(self, usage: TokenUsage) -> None:
        with self._lock:
            self._usage = self._usage + usage

    def _log(self, record: dict) -> None:
        if self._log_path is None:
            return
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            with self._log_path.open("a", encoding="utf-8") as fh:
                fh.write(line)

    def backoff(self, attempt: int) -> float:
        """Exponential delay for retry ``attempt`` (0-based) with up to 25% jitter."""
        base = self.config.backoff_base * (2 ** attempt)
        with self._lock:
            jitter = self._rng.random()
        return min(self.config.backoff_max, base * (1.0 + 0.25 * jitter))

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- transport ---------------------------------------------------------

    def request(self, method: str, path: str, body: dict | None = None) -> tuple[dict, int]:
        """Send one logical request, retrying 429/5xx. Returns (json, attempts)."""
        meta = (body or {}).get("metadata", {})
        for attempt in range(self.config.max_retries + 1):
            self.limiter.acquire()
            self._account(TokenUsage(request_count=1))
            t0 = self.clock()
            try:
                resp = self._http.request(method, path, json=body)
            except httpx.HTTPError as exc:
                err: Exception = TransportError(None, str(exc))
                wait = self.backoff(attempt)
                status = None
            else:
                status = resp.status_code
                self._log({"endpoint": self.config.name, "method": method, "path": path,
                           "task": meta.get("task"), "item_ids": meta.get("item_ids"),
                           "attempt": attempt + 1, "status": status})
                if status < 300:
                    try:
                        return resp.json(), attempt + 1
                    except ValueError:
                        raise TransportError(status, "response is not JSON: " + resp.text) from None
                if status == 429:
                    retry_after = _retry_after(resp)
                    err = RateLimited(retry_after)
                    wait = retry_after if retry_after is not None else self.backoff(attempt)
                elif status >= 500:
                    err = TransportError(status, resp.text)
                    wait = self.backoff(attempt)
                else:
                    raise TransportError(status, resp.text)
            log.debug("%s %s failed (status=%s, attempt %d) after %.0f ms",
                      method, path, status, attempt + 1, 1000 * (self.clock() - t0))
            if attempt == self.config.max_retries:
                raise err
            self.sleep(wait)
        raise AssertionError("unreachable")

    def _post_chat(self, body: dict) -> tuple[dict, TokenUsage, float]:
        t0 = self.clock()
        data, attempts = self.request("POST", "/chat/completions", body)
        i, o = _usage_from(data)
        self._account(TokenUsage(i, o, 0))
        return data, TokenUsage(i, o, attempts), 1000.0 * (self.clock() - t0)

    # -- chat-style operations ---------------------------------------------

    def _chat_body(self, parts: list, task: str, item_ids: Sequence[str], **extra_meta) -> dict:
        body = {
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": parts}],
            "metadata": {"task": task, "item_ids": ",".join(item_ids), **extra_meta},
        }
        if self.config.temperature is not None:
            body["temperature"] = self.config.temperature
        if self.config.max_tokens is not None:
            body["max_tokens"] = self.config.max_tokens * max(1, len(item_ids))
        return body

    def _image_body(self, items: Sequence[ImageRecord], prompt: str, task: str) -> dict:
        urls = [encode_image(it) for it in items]  # fail before any transport
        if len(items) == 1:
            parts = [{"type": "text", "text": prompt},
                     {"type": "image_url", "image_url": {"url": urls[0]}}]
        else:
            parts = [{"type": "text", "text": prompt + BATCH_SUFFIX.format(n=len(items))}]
            for k, url in enumerate(urls, 1):
                parts.append({"type": "text", "text": f"Image {k}:"})
                parts.append({"type": "image_url", "image_url": {"url": url}})
        return self._chat_body(parts, task, [it.id for it in items])

    def chat_images(self, items: Sequence[ImageRecord], prompt: str, task: str) -> ChunkResult:
        """One logical request over ``items``; outcomes are responses or exceptions."""
        if not items:
            raise EmptyInput("no items to send")
        if self.config.batch_api == "async" and self.config.mode == "batch":
            return self._chat_job(items, prompt, task)
        body = self._image_body(items, prompt, task)
        data, usage, latency = self._post_chat(body)
        text = _message_text(data).strip()
        if len(items) == 1:
            outcome = (RawModelResponse(items[0].id, text, usage, latency) if text
                       else EmptyResponse(f"{items[0].id}: empty response"))
            return ChunkResult([outcome], usage)
        answers = parse_numbered_lines(text, len(items))
        outcomes = []
        for k, it in enumerate(items, 1):
            if k in answers:
                # Per-item usage is not reported inside a batch; the chunk carries it.
                outcomes.append(RawModelResponse(it.id, answers[k], TokenUsage(), latency))
            else:
                outcomes.append(EmptyResponse(f"{it.id}: no answer line {k} in batch response"))
        return ChunkResult(outcomes, usage)

    def _chat_job(self, items: Sequence[ImageRecord], prompt: str, task: str) -> ChunkResult:
        requests = [{"custom_id": it.id, "body": self._image_body([it], prompt, task)} for it in items]
        t0 = self.clock()
        job, attempts = self.request("POST", "/batches", {
            "model": self.config.model_id, "requests": requests,
            "metadata": {"task": task, "item_ids": ",".join(it.id for it in items)},
        })
        deadline = t0 + max(self.config.timeout, self.config.poll_interval) * 10
        while job.get("status") not in ("completed", "failed", "expired", "cancelled"):
            if self.clock() > deadline:
                raise TransportError(None, f"batch job {job.get('id')} did not finish in time")
            self.sleep(self.config.poll_interval)
            job, n = self.request("GET", f"/batches/{job['id']}")
            attempts += n
        if job["status"] != "completed":
            raise TransportError(None, f"batch job {job.get('id')} ended with status {job['status']}")
        by_id = {r.get("custom_id"): r.get("body", {}) for r in job.get("responses", [])}
        latency = 1000.0 * (self.clock() - t0)
        total_in = total_out = 0
        outcomes = []
        for it in items:
            data = by_id.get(it.id)
            if data is None:
                outcomes.append(EmptyResponse(f"{it.id}: missing from batch job output"))
                continue
            i, o = _usage_from(data)
            total_in, total_out = total_in + i, total_out + o
            text = _message_text(data).strip()
            outcomes.append(RawModelResponse(it.id, text, TokenUsage(i, o, 0), latency) if text
                            else EmptyResponse(f"{it.id}: empty response"))
        self._account(TokenUsage(total_in, total_out, 0))
        return ChunkResult(outcomes, TokenUsage(total_in, total_out, attempts))

    def _single(self, item: ImageRecord, prompt: str, task: str) -> RawModelResponse:
        res = self.chat_images([item], prompt, task)
        out = res.outcomes[0]
        if isinstance(out, BaseException):
            raise out
        return RawModelResponse(out.item_id, out.text, res.usage, out.latency)

    def classify_image_vqa(self, item: ImageRecord, prompt: str) -> RawModelResponse:
        if not prompt.strip():
            raise ValueError("prompt must be non-empty")
        return self._single(item, prompt, "vqa")

    def caption_image(self, item: ImageRecord, instruction: str = CAPTION_INSTRUCTION) -> Caption:
        resp = self._single(item, instruction, "caption")
        return Caption(item.id, resp.text, self.config.model_id, resp.usage)

    def zero_shot_label(self, candidates: Sequence[str], evidence: str) -> RawModelResponse:
        """Ask which candidate class the evidence describes; always sends a request."""
        if not candidates:
            raise ValueError("candidates must be non-empty")
        if not evidence.strip():
            raise ValueError("evidence must be non-empty")
        prompt = CLUSTER_MAPPING.format(keywords=evidence, classes=join_classes(list(candidates)))
        body = self._chat_body([{"type": "text", "text": prompt}], "label", [],
                               evidence=evidence, candidates=list(candidates))
        data, usage, latency = self._post_chat(body)
        text = _message_text(data).strip()
        if not text:
            raise EmptyResponse("empty labeling response")
        return RawModelResponse("", text, usage, latency)

    # -- chunk operations for run_batched -----------------------------------

    def vqa_op(self, prompt: str) -> Callable[[Sequence[ImageRecord]], ChunkResult]:
        return lambda chunk: self.chat_images(chunk, prompt, "vqa")

    def caption_op(self, instruction: str = CAPTION_INSTRUCTION) -> Callable[[Sequence[ImageRecord]], ChunkResult]:
        def op(chunk):
            res = self.chat_images(chunk, instruction, "caption")
            outs = [o if isinstance(o, BaseException) else Caption(o.item_id, o.text, self.config.model_id, o.usage)
                    for o in res.outcomes]
            return ChunkResult(outs, res.usage)
        return op

    # -- embeddings ---------------------------------------------------------

    def _embed(self, payload: str, modality: str, item_id: str) -> EmbeddingVector:
        body = {"model": self.config.model_id, "input": payload, "modality": modality,
                "metadata": {"task": f"embed_{modality}", "item_ids": item_id}}
        data, _ = self.request("POST", "/embeddings", body)
        i, o = _usage_from(data)
        self._account(TokenUsage(i, o, 0))
        if "embedding" in data:
            values = data["embedding"]
        else:
            try:
                values = data["data"][0]["embedding"]
            except (KeyError, IndexError, TypeError):
                raise EmptyResponse(f"{item_id}: no embedding in response") from None
        declared = data.get("dims")
        if declared is not None and int(declared) != len(values):
            raise DimensionMismatch(f"{item_id}: response declares {declared} dims, carries {len(values)}")
        if self.config.dims is not None and len(values) != self.config.dims:
            raise DimensionMismatch(f"{item_id}: expected {self.config.dims} dims, got {len(values)}")
        return EmbeddingVector(item_id, modality, self.config.model_id, values)

    def embed_text(self, text: str, item_id: str | None = None) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("text to embed must be non-empty")
        return self._embed(text, "text", item_id if item_id is not None else text)

    def embed_image(self, item: ImageRecord) -> EmbeddingVector:
        return self._embed(encode_image(item), "image", item.id)

    def embedder(self, modality: str) -> "EndpointEmbedder":
        return EndpointEmbedder(self, modality)


class EndpointEmbedder:
    """Adapter exposing a client as a cache ``Embedder``."""

    def __init__(self, client: ModelClient, modality: str):
        if modality not in ("image", "text"):
            raise ValueError(f"unknown modality {modality!r}")
        self.client = client
        self.modality = modality
        self.model_id = client.model_id

    def embed(self, item) -> EmbeddingVector:
        if self.modality == "image":
            return self.client.embed_image(item)
        return self.client.embed_text(item)


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None
