"""Deterministic in-process backend for tests and offline runs.

``MockBackend`` answers the same wire protocol as a real endpoint through
``httpx.MockTransport``. Its behaviour is fixed by a versioned
``MockFixture``:

* ``echo``     -- VQA answers with the true class name, captions are built
                  from class-specific phrases, image embeddings are Gaussians
                  around a per-class centre;
* ``random``   -- answers, captions and embeddings carry no class signal;
* ``constant`` -- every answer is one fixed string.

Text embeddings are always a signed feature hash of the words plus a small
term seeded by the full text, so distinct texts get distinct vectors.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import httpx
import numpy as np

from ..dataset import TAXONOMY, CesClass
from ..discover.bow import tokenize
from .client import ModelClient
from .types import EndpointConfig

FIXTURE_VERSION = "v1"
FIXTURE_KINDS = ("echo", "random", "constant")

# A caption is "<opener> <core><detail><suffix>." -- core and detail carry the
# class, opener and suffix are shared by every class.
CAPTION_CORES: dict[CesClass, tuple[str, ...]] = {
    CesClass.CulturalReligious: (
        "an old stone church with a bell tower and religious statues",
        "an old church bell tower beside a religious shrine",
        "a religious chapel and old church with a bell tower",
    ),
    CesClass.FaunaFlora: (
        "a wild deer among green plants and blooming flowers",
        "a butterfly resting on blooming wild flowers and green plants",
        "a wild bird perched among green plants and blooming flowers",
    ),
    CesClass.Gastronomy: (
        "a plate of local food with wine on a restaurant table",
        "a traditional dish of local food served with wine in a restaurant",
        "a restaurant table with a plate of local food and wine",
    ),
    CesClass.LandscapeNature: (
        "a wide mountain valley with a river under a blue sky",
        "a mountain lake in a wide valley under a blue sky",
        "a panoramic mountain valley with a lake and blue sky",
    ),
    CesClass.Sports: (
        "a hiker with a backpack climbing a rocky trail during a race",
        "athletes running a trail race with backpacks on a rocky path",
        "a climber and a hiker on a rocky trail race course",
    ),
    CesClass.UrbanRural: (
        "old houses along a narrow street in a small village",
        "a narrow village street lined with old houses and shops",
        "old houses and a narrow street in a small rural village",
    ),
}
CAPTION_DETAILS: dict[CesClass, tuple[str, ...]] = {
    CesClass.CulturalReligious: (" and a carved altar", " with candles and icons", " near a monastery",
                                 " during a religious festival", " with painted frescoes", " and a stone cross"),
    CesClass.FaunaFlora: (" and a small insect", " beside tall grass and moss", " with a fox nearby",
                          " among ferns and wild orchids", " and a squirrel", " with a bee on a petal"),
    CesClass.Gastronomy: (" with bread and cheese", " and a bowl of soup", " with grilled meat",
                          " and a glass of beer", " with fresh pasta", " and a cake for dessert"),
    CesClass.LandscapeNature: (" and distant snowy peaks", " with pine forest slopes", " and a waterfall",
                               " with rolling hills", " and alpine meadows", " with a glacier above"),
    CesClass.Sports: (" with a helmet and ropes", " and cheering spectators", " with ski poles",
                      " and a mountain bike", " with a finish line", " and trekking poles"),
    CesClass.UrbanRural: (" with a town square", " and parked cars", " with a farmhouse and barn",
                          " and wooden balconies", " with a market stall", " and tiled roofs"),
}
CAPTION_OPENERS = ("", "A photo of ", "A view of ", "A picture showing ", "An image of ", "Close-up of ")
CAPTION_SUFFIXES = (
    "", " on a sunny day", " in the morning", " seen from afar",
    " in winter", " in the evening light", " in summer", " on a cloudy afternoon",
)
UNSURE = "I am not sure which category this image belongs to."
NO_MATCH = "none of these"


def stable_hash(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def class_vocabulary() -> dict[CesClass, frozenset[str]]:
    """Words that occur in the captions of exactly one class."""
    words = {c: set(tokenize(" ".join(CAPTION_CORES[c] + CAPTION_DETAILS[c]))) for c in CAPTION_CORES}
    out = {}
    for c, ws in words.items():
        others = set().union(*(w for d, w in words.items() if d is not c))
        out[c] = frozenset(ws - others)
    return out


def hashed_text_vector(text: str, dims: int, seed: int = 0) -> np.ndarray:
    vec = np.zeros(dims)
    for tok in re.findall(r"\w+", text.lower()):
        h = stable_hash(seed, "tok", tok)
        vec[h % dims] += 1.0 if (h >> 32) & 1 else -1.0
    vec += 0.05 * np.random.default_rng(stable_hash(seed, "text", text)).standard_normal(dims)
    return vec


@dataclass
class MockFixture:
    kind: str = "echo"
    labels: Mapping[str, CesClass] = field(default_factory=dict)
    seed: int = 0
    constant: str = "Landscape-Nature"
    responses: Mapping[str, str] = field(default_factory=dict)  # per-item overrides
    image_dims: int = 64
    text_dims: int = 256
    separation: float = 8.0
    noise: float = 1.0
    usage_per_item: tuple[int, int] = (10, 2)
    taxonomy: tuple[CesClass, ...] = TAXONOMY
    version: str = FIXTURE_VERSION

    def __post_init__(self):
        if self.kind not in FIXTURE_KINDS:
            raise ValueError(f"unknown mock fixture {self.kind!r}; expected one of {FIXTURE_KINDS}")

    @property
    def name(self) -> str:
        return f"mock-{self.kind}-{self.version}"

    def _class_for(self, item_id: str) -> CesClass | None:
        if self.kind == "random":
            return self.taxonomy[stable_hash(self.seed, "cls", item_id) % len(self.taxonomy)]
        return self.labels.get(item_id)

    def vqa_answer(self, item_id: str) -> str:
        if item_id in self.responses:
            return self.responses[item_id]
        if self.kind == "constant":
            return self.constant
        cls = self._class_for(item_id)
        return cls.display_name if cls is not None else UNSURE

    def caption(self, item_id: str) -> str:
        if item_id in self.responses:
            return self.responses[item_id]
        if self.kind == "constant":
            return self.constant
        cls = self._class_for(item_id)
        h = stable_hash(self.seed, "cap", item_id)
        opener = CAPTION_OPENERS[h % len(CAPTION_OPENERS)]
        suffix = CAPTION_SUFFIXES[(h >> 8) % len(CAPTION_SUFFIXES)]
        if cls is None:
            return f"{opener or 'A '}photograph{suffix}."
        core = CAPTION_CORES[cls][(h >> 16) % len(CAPTION_CORES[cls])]
        detail = CAPTION_DETAILS[cls][(h >> 24) % len(CAPTION_DETAILS[cls])]
        text = f"{opener}{core}{detail}{suffix}."
        return text[0].upper() + text[1:]

    def label(self, candidates, evidence: str) -> str:
        if self.kind == "constant":
            return self.constant
        cands = [CesClass.from_label(c) for c in candidates]
        if self.kind == "random":
            return cands[stable_hash(self.seed, "label", evidence) % len(cands)].display_name
        vocab = class_vocabulary()
        words = set(tokenize(evidence))
        scores = [len(words & vocab.get(c, frozenset())) for c in cands]
        best = max(scores)
        return cands[scores.index(best)].display_name if best > 0 else NO_MATCH

    def centroids(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7])
        c = rng.standard_normal((len(self.taxonomy), self.image_dims))
        return self.separation * c / np.linalg.norm(c, axis=1, keepdims=True)

    def image_embedding(self, item_id: str) -> np.ndarray:
        rng = np.random.default_rng([self.seed, stable_hash("img", item_id)])
        noise = self.noise * rng.standard_normal(self.image_dims)
        cls = None if self.kind == "random" else self.labels.get(item_id)
        if cls is None:
            return noise
        return self.centroids()[self.taxonomy.index(cls)] + noise

    def text_embedding(self, text: str) -> np.ndarray:
        return hashed_text_vector(text, self.text_dims, self.seed)


class MockBackend:
    """``httpx.MockTransport`` handler implementing the endpoint protocol.

    ``faults`` is a queue of HTTP statuses (or ``(status, headers)`` pairs)
    returned, one per request, before normal service resumes. Items listed in
    ``fail_items`` are dropped from batch answers, or rejected with HTTP 422
    when sent alone. Async batch jobs report ``in_progress`` for
    ``job_polls`` polls before completing.
    """

    def __init__(self, fixture: MockFixture, faults=(), fail_items=(), job_polls: int = 1):
        self.fixture = fixture
        self.faults = deque(faults)
        self.fail_items = set(fail_items)
        self.job_polls = job_polls
        self.calls: list[dict] = []
        self._jobs: dict[str, dict] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    @property
    def n_calls(self) -> int:
        return len(self.calls)

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)

    def client(self, config: EndpointConfig, **kwargs) -> ModelClient:
        return ModelClient(config, transport=self.transport(), **kwargs)

    def handle(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content) if request.content else {}
        path = request.url.path
        with self._lock:
            self.calls.append({"method": request.method, "path": path,
                               "metadata": body.get("metadata", {})})
            fault = self.faults.popleft() if self.faults else None
        if fault is not None:
            status, headers = fault if isinstance(fault, tuple) else (fault, {})
            return httpx.Response(status, headers=headers, json={"error": f"scripted fault {status}"})
        if request.method == "POST" and path.endswith("/chat/completions"):
            return self._chat(body)
        if request.method == "POST" and path.endswith("/embeddings"):
            return self._embeddings(body)
        if request.method == "POST" and path.endswith("/batches"):
            return self._submit(body)
        m = re.search(r"/batches/([^/]+)$", path)
        if request.method == "GET" and m:
            return self._poll(m.group(1))
        return httpx.Response(404, json={"error": f"no route {request.method} {path}"})

    # -- routes ---------------------------------------------------------------

    def _answer(self, task: str, item_id: str) -> str:
        if task == "caption":
            return self.fixture.caption(item_id)
        return self.fixture.vqa_answer(item_id)

    def _usage(self, n: int, with_output: bool = True) -> dict:
        i, o = self.fixture.usage_per_item
        return {"prompt_tokens": i * n, "completion_tokens": o * n if with_output else 0}

    def _chat_payload(self, body: dict) -> tuple[int, dict]:
        meta = body.get("metadata", {})
        task = meta.get("task", "vqa")
        if task == "label":
            text = self.fixture.label(meta.get("candidates", []), meta.get("evidence", ""))
            return 200, self._completion(text, 1)
        ids = [i for i in meta.get("item_ids", "").split(",") if i]
        if not ids:
            return 400, {"error": "metadata.item_ids is required"}
        if len(ids) == 1:
            if ids[0] in self.fail_items:
                return 422, {"error": f"cannot process {ids[0]}"}
            return 200, self._completion(self._answer(task, ids[0]), 1)
        lines = [f"{k}: {self._answer(task, i)}" for k, i in enumerate(ids, 1) if i not in self.fail_items]
        return 200, self._completion("\n".join(lines), len(ids))

    def _completion(self, text: str, n: int) -> dict:
        return {
            "id": f"mock-{next(self._ids)}",
            "model": self.fixture.name,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
            "usage": self._usage(n),
        }

    def _chat(self, body: dict) -> httpx.Response:
        status, payload = self._chat_payload(body)
        return httpx.Response(status, json=payload)

    def _embeddings(self, body: dict) -> httpx.Response:
        payload = body.get("input")
        if not isinstance(payload, str) or not payload:
            return httpx.Response(400, json={"error": "input must be a non-empty string"})
        if body.get("modality") == "image":
            item_id = body.get("metadata", {}).get("item_ids", "")
            vec = self.fixture.image_embedding(item_id)
        else:
            vec = self.fixture.text_embedding(payload)
        return httpx.Response(200, json={"embedding": vec.tolist(), "dims": int(vec.size),
                                         "usage": self._usage(1, with_output=False)})

    def _submit(self, body: dict) -> httpx.Response:
        responses = []
        for req in body.get("requests", []):
            status, payload = self._chat_payload(req.get("body", {}))
            if status == 200:
                responses.append({"custom_id": req.get("custom_id"), "body": payload})
        job_id = f"job-{next(self._ids)}"
        with self._lock:
            self._jobs[job_id] = {"polls": 0, "responses": responses}
        return httpx.Response(200, json={"id": job_id, "status": "in_progress"})

    def _poll(self, job_id: str) -> httpx.Response:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                return httpx.Response(404, json={"error": f"unknown job {job_id}"})
            job["polls"] += 1
            done = job["polls"] > self.job_polls
        if not done:
            return httpx.Response(200, json={"id": job_id, "status": "in_progress"})
        return httpx.Response(200, json={"id": job_id, "status": "completed", "responses": job["responses"]})


def parse_backend(spec: str) -> tuple[str, str | None]:
    """Split ``mock:<kind>[=<arg>]`` into (kind, arg)."""
    if not spec.startswith("mock:"):
        raise ValueError(f"unsupported backend {spec!r}; only mock:<fixture> backends are built in")
    kind, _, arg = spec[len("mock:"):].partition("=")
    if kind not in FIXTURE_KINDS:
        raise ValueError(f"unknown mock fixture {kind!r}; expected one of {FIXTURE_KINDS}")
    return kind, arg or None
