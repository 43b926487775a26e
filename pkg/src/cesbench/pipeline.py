"""End-to-end runs of the five classification approaches.

A run reads a manifest, talks to its endpoints (or the mock backend),
evaluates on a seeded stratified test split, and writes every artifact under
its output directory together with a ``run_record.json`` that is enough to
replay it.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .cost import PricingTable, cost_of, load_pricing
from .dataset import DatasetManifest, ImageRecord, SplitSpec, ingest_manifest, labels_of, stratified_split
from .discover import (
    NOISE,
    ReductionConfig,
    build_bow,
    cluster_hdbscan,
    cluster_kmeans,
    evaluate_discovery,
    map_clusters,
    reduce_dimensions,
)
from .embeddings import EmbeddingCache, EmbeddingVector, cache_get_or_compute
from .errors import ConfigError, DataError
from .fewshot import FewShotConfig, curve_csv, run_experiment, summary_report
from .metrics import UNRESOLVED, MetricsReport, compute, load_reports, render_report
from .model_clients import (
    ChunkResult,
    EndpointConfig,
    ItemError,
    MockBackend,
    MockFixture,
    ModelClient,
    TokenUsage,
    parse_backend,
    run_batched,
)
from .probe import evaluate_probe, preset, save_probe, train_probe
from .prompting import extract_class, get_template, render_prompt

log = logging.getLogger(__name__)

APPROACHES = ("prompt-zeroshot", "caption-probe", "discover", "visual-probe", "fewshot")

# endpoint roles each approach talks to
ROLES: dict[str, tuple[str, ...]] = {
    "prompt-zeroshot": ("vqa",),
    "caption-probe": ("caption", "text_embed"),
    "discover": ("caption", "text_embed", "labeler"),
    "visual-probe": ("image_embed",),
    "fewshot": ("image_embed",),
}

DEFAULT_PARAMS: dict[str, dict] = {
    "prompt-zeroshot": {"prompt": "simple"},
    "caption-probe": {"preset": "text-probe", "train": {}},
    "visual-probe": {"preset": "vision-probe", "train": {}},
    "fewshot": {"shots": [10], "trials": 30, "normalize": False, "workers": 1},
    "discover": {"clusterer": "kmeans", "k": 6, "min_cluster_size": 20, "selection": "leaf",
                 "n_neighbors": 15, "output_dims": 20, "top_n": 10, "strict": False},
}

MOCK_BASE_URL = "http://mock.invalid/v1"
CACHE_ENV = "CESBENCH_CACHE_DIR"


@dataclass
class RunConfig:
    manifest: str
    approach: str
    out: str
    seed: int = 42
    backend: str = "mock:echo"
    mode: str = "no_batch"
    batch_size: int | None = None
    format: str | None = None
    test_fraction: float = 0.2
    fixture_seed: int = 0
    max_in_flight: int = 1
    pricing: str | None = None
    endpoints: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mode = self.mode.replace("-", "_").lower()

    def validate(self) -> "RunConfig":
        if self.approach not in APPROACHES:
            raise ConfigError(f"unknown approach {self.approach!r}; expected one of {', '.join(APPROACHES)}")
        if self.mode not in ("batch", "no_batch"):
            raise ConfigError(f"mode must be batch or no-batch, got {self.mode!r}")
        if self.mode == "no_batch" and self.batch_size not in (None, 1):
            raise ConfigError("--batch-size requires batch mode")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.backend.startswith("mock:"):
            try:
                parse_backend(self.backend)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        elif self.backend == "http":
            missing = [r for r in ROLES[self.approach] if r not in self.endpoints]
            if missing:
                raise ConfigError(f"approach {self.approach} needs endpoints {missing}")
        else:
            raise ConfigError(f"backend must be 'http' or 'mock:<fixture>', got {self.backend!r}")
        for role, ep in self.endpoints.items():
            clash = {"mode", "batch_size"} & set(ep)
            if clash:
                raise ConfigError(f"endpoint {role}: set {sorted(clash)} at run level, not per endpoint")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.approach])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.approach}: {sorted(unknown)}")
        return self

    def resolved_params(self) -> dict:
        return {**copy.deepcopy(DEFAULT_PARAMS[self.approach]), **copy.deepcopy(self.params)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = self.resolved_params() if self.approach in DEFAULT_PARAMS else d["params"]
        return d

    @classmethod
    def from_dict(cls, obj: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown run configuration keys {sorted(unknown)}")
        return cls(**dict(obj))


@dataclass
class RunRecord:
    config: dict
    input_hash: str
    started: str
    finished: str
    artifacts: list[str]
    backend_fixture: str | None = None
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read run record {path}: {exc}") from None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunContext:
    """Endpoints, clients, cache and output directory for one run."""

    def __init__(self, config: RunConfig, manifest: DatasetManifest):
        self.config = config
        self.manifest = manifest
        self.resolved = config.resolved_params()
        self.out = Path(config.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.request_log = self.out / "requests.jsonl"
        for stale in (self.request_log, self.out / "errors.jsonl"):
            if stale.exists():
                stale.unlink()
        self.mock: MockBackend | None = None
        if config.backend.startswith("mock:"):
            kind, arg = parse_backend(config.backend)
            fixture = MockFixture(kind, labels_of(manifest.records), seed=config.fixture_seed,
                                  taxonomy=manifest.taxonomy,
                                  **({"constant": arg} if arg else {}))
            self.mock = MockBackend(fixture)
        self.endpoints = {role: self._endpoint(role) for role in ROLES[config.approach]}
        self.clients: dict[str, ModelClient] = {}
        cache_root = os.environ.get(CACHE_ENV) or self.out / "cache"
        self.cache = EmbeddingCache(cache_root)

    @property
    def cache_tag(self) -> str:
        if self.mock is not None:
            return f"{self.config.backend}#seed={self.config.fixture_seed}"
        return ""

    def _endpoint(self, role: str) -> EndpointConfig:
        spec = dict(self.config.endpoints.get(role, {}))
        if self.mock is not None:
            spec.setdefault("base_url", MOCK_BASE_URL)
            spec.setdefault("model_id", f"{self.mock.fixture.name}/{role}")
        spec.setdefault("max_in_flight", self.config.max_in_flight)
        spec["mode"] = self.config.mode
        spec["batch_size"] = self.config.batch_size if self.config.mode == "batch" else None
        return EndpointConfig.from_dict(role, spec)

    def client(self, role: str) -> ModelClient:
        if role not in self.clients:
            transport = self.mock.transport() if self.mock is not None else None
            self.clients[role] = ModelClient(self.endpoints[role], transport=transport,
                                             request_log=self.request_log, seed=self.config.seed)
        return self.clients[role]

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        if name not in self.artifacts:
            self.artifacts.append(name)
        return path

    def close(self) -> None:
        for c in self.clients.values():
            c.close()


def _jsonl(rows: Sequence[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _split(ctx: RunContext) -> tuple[list[ImageRecord], list[ImageRecord]]:
    return stratified_split(ctx.manifest, SplitSpec(ctx.config.test_fraction, ctx.config.seed))


def _errors(ctx: RunContext, errors: list[ItemError], stage: str) -> None:
    if errors:
        rows = [{"stage": stage, **e.to_dict()} for e in errors]
        path = ctx.out / "errors.jsonl"
        with path.open("a", encoding="utf-8") as fh:
            fh.write(_jsonl(rows))
        if "errors.jsonl" not in ctx.artifacts:
            ctx.artifacts.append("errors.jsonl")


def _per_item_op(fn: Callable) -> Callable[[Sequence], ChunkResult]:
    def op(chunk):
        outs = []
        for item in chunk:
            try:
                outs.append(fn(item))
            except Exception as exc:  # surfaced as an ItemError by run_batched
                outs.append(exc)
        return ChunkResult(outs)
    return op


def embed_images(ctx: RunContext, records: Sequence[ImageRecord]) -> dict[str, EmbeddingVector]:
    client = ctx.client("image_embed")
    producer = client.embedder("image")
    run = run_batched(records, client.config,
                      _per_item_op(lambda r: cache_get_or_compute(ctx.cache, r, producer, ctx.cache_tag)))
    _errors(ctx, run.errors, "embed_image")
    return {v.item_id: v for v in run.successes}


def caption_records(ctx: RunContext, records: Sequence[ImageRecord]) -> dict[str, str]:
    client = ctx.client("caption")
    run = run_batched(records, client.config, client.caption_op())
    _errors(ctx, run.errors, "caption")
    caps = {c.item_id: c.text for c in run.successes}
    ctx.write("captions.jsonl", _jsonl([{"item_id": r.id, "caption": caps[r.id]} for r in records if r.id in caps]))
    return caps


def embed_captions(ctx: RunContext, captions: Mapping[str, str]) -> dict[str, EmbeddingVector]:
    """Text embeddings of captions, cached by caption content and re-keyed by item id."""
    client = ctx.client("text_embed")
    producer = client.embedder("text")
    ids = list(captions)

    def one(item_id):
        v = cache_get_or_compute(ctx.cache, captions[item_id], producer, ctx.cache_tag)
        return v.with_values(v.values, item_id=item_id)

    run = run_batched(ids, client.config, _per_item_op(one))
    _errors(ctx, run.errors, "embed_text")
    return {v.item_id: v for v in run.successes}


def _label(ctx: RunContext, role: str, extra: str = "") -> str:
    name = f"{ctx.config.approach} ({ctx.endpoints[role].model_id})"
    return f"{name} {extra}".strip()


# ---------------------------------------------------------------------------
# approaches


def run_prompt_zeroshot(ctx: RunContext, params: dict) -> list[MetricsReport]:
    _, test = _split(ctx)
    template = get_template(params["prompt"])
    prompt = render_prompt(template, ctx.manifest.taxonomy)
    client = ctx.client("vqa")
    run = run_batched(test, client.config, client.vqa_op(prompt))
    _errors(ctx, run.errors, "vqa")
    preds, rows = [], []
    for rec, res in zip(test, run.results):
        if isinstance(res, ItemError):
            preds.append((rec.id, UNRESOLVED))
            rows.append({"item_id": rec.id, "raw": None, "predicted": None, "match_kind": "error"})
            continue
        d = extract_class(res.text, ctx.manifest.taxonomy, rec.id)
        preds.append((rec.id, d.predicted))
        rows.append({"item_id": rec.id, "raw": res.text,
                     "predicted": None if d.predicted is UNRESOLVED else d.predicted.value,
                     "match_kind": d.match_kind})
    ctx.write("decisions.jsonl", _jsonl(rows))
    truth = [(r.id, r.label) for r in test]
    return [compute(preds, truth, classes=ctx.manifest.taxonomy,
                    label=_label(ctx, "vqa", f"prompt {template.id}"))]


def _probe(ctx: RunContext, params: dict, vectors: Mapping[str, EmbeddingVector], role: str) -> list[MetricsReport]:
    train, test = _split(ctx)
    train_f = [(vectors[r.id], r.label) for r in train if r.id in vectors]
    test_f = [(vectors[r.id], r.label) for r in test if r.id in vectors]
    cfg = preset(params["preset"], **{"seed": ctx.config.seed, **params.get("train", {})})
    model, report = train_probe(train_f, cfg, classes=ctx.manifest.taxonomy)
    save_probe(model, ctx.out / "probe.ckpt")
    ctx.artifacts.append("probe.ckpt")
    summary = {"epoch_losses": report.epoch_losses, "train_accuracy": report.train_accuracy,
               "config": report.config, "stopped_early": report.stopped_early}
    ctx.write("train_report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    metrics = evaluate_probe(model, test_f, label=_label(ctx, role))
    dropped = len(test) - len(test_f)
    if dropped:
        metrics.flags.append(f"items_without_embedding:{dropped}")
    return [metrics]


def run_visual_probe(ctx: RunContext, params: dict) -> list[MetricsReport]:
    vectors = embed_images(ctx, ctx.manifest.labeled())
    return _probe(ctx, params, vectors, "image_embed")


def run_caption_probe(ctx: RunContext, params: dict) -> list[MetricsReport]:
    captions = caption_records(ctx, ctx.manifest.labeled())
    vectors = embed_captions(ctx, captions)
    return _probe(ctx, params, vectors, "text_embed")


def run_fewshot(ctx: RunContext, params: dict) -> list[MetricsReport]:
    vectors = embed_images(ctx, ctx.manifest.labeled())
    cfg = FewShotConfig(
        shots=tuple(params["shots"]), trials=int(params["trials"]), base_seed=ctx.config.seed,
        model_id=ctx.endpoints["image_embed"].model_id,
        normalize_before_average=bool(params["normalize"]), workers=int(params["workers"]),
    )
    summaries = run_experiment(ctx.manifest, cfg, vectors)
    ctx.write("curve.csv", curve_csv(summaries))
    ctx.write("trials.json", json.dumps([s.to_dict() for s in summaries], indent=2, sort_keys=True) + "\n")
    return [summary_report(s, label=_label(ctx, "image_embed", f"{s.shots}-shot")) for s in summaries]


def run_discover(ctx: RunContext, params: dict) -> list[MetricsReport]:
    records = ctx.manifest.labeled()
    captions = caption_records(ctx, records)
    vectors = embed_captions(ctx, captions)
    ids = [r.id for r in records if r.id in vectors]
    X = np.stack([vectors[i].values for i in ids])
    Y = reduce_dimensions(X, ReductionConfig(n_neighbors=int(params["n_neighbors"]),
                                             output_dims=int(params["output_dims"]), seed=ctx.config.seed))
    algo = params["clusterer"]
    if algo == "kmeans":
        assignment = cluster_kmeans(Y, k=int(params["k"]), seed=ctx.config.seed, item_ids=ids)
    elif algo == "hdbscan":
        assignment = cluster_hdbscan(Y, min_cluster_size=int(params["min_cluster_size"]),
                                     selection=params["selection"], item_ids=ids)
    else:
        raise ConfigError(f"unknown clusterer {algo!r}; expected kmeans or hdbscan")
    members: dict[int, list[str]] = {}
    for i, lab in zip(ids, assignment.labels.tolist()):
        if lab != NOISE:
            members.setdefault(lab, []).append(captions[i])
    bows = build_bow(members, top_n=int(params["top_n"]))
    mapping = map_clusters(bows, ctx.client("labeler"), ctx.manifest.taxonomy, strict=bool(params["strict"]))
    rows = ["item_id,cluster,predicted_class"]
    for i, lab in zip(ids, assignment.labels.tolist()):
        cls = mapping.mapping.get(lab)
        rows.append(f"{i},{lab},{cls.value if cls is not None else ''}")
    ctx.write("assignment.csv", "\n".join(rows) + "\n")
    ctx.write("bow.json", json.dumps([b.to_dict() for b in bows], indent=2) + "\n")
    ctx.write("mapping.json", json.dumps(mapping.to_dict(), indent=2, sort_keys=True) + "\n")
    truth = {r.id: r.label for r in records}
    report = evaluate_discovery(assignment, mapping, truth, ctx.manifest.taxonomy,
                                label=_label(ctx, "text_embed", algo))
    shared = mapping.shared_classes()
    if shared:
        report.flags.append("shared_classes:" + ",".join(sorted(c.value for c in shared)))
    return [report]


RUNNERS: dict[str, Callable[[RunContext, dict], list[MetricsReport]]] = {
    "prompt-zeroshot": run_prompt_zeroshot,
    "caption-probe": run_caption_probe,
    "discover": run_discover,
    "visual-probe": run_visual_probe,
    "fewshot": run_fewshot,
}


# ---------------------------------------------------------------------------
# usage and cost


def usage_summary(ctx: RunContext) -> dict:
    out = {}
    for role, client in sorted(ctx.clients.items()):
        out[role] = {"model_id": client.config.model_id, "mode": client.config.mode,
                     "prompt_id": ctx.resolved.get("prompt", "") if role == "vqa" else "",
                     **client.usage.to_dict()}
    return out


def price_usage(usage: Mapping[str, Mapping], pricing: PricingTable, strict: bool = False) -> list:
    """CostReports for usage rows ``{model_id, mode, input_tokens, output_tokens[, prompt_id]}``.

    Unless ``strict``, rows whose model has no pricing entry at all are
    skipped (e.g. self-hosted embedders); a model priced for another mode
    only is always an error.
    """
    priced = {e.model_id for e in pricing.entries}
    reports = []
    for u in usage.values():
        try:
            model, mode = u["model_id"], u["mode"]
            tokens = TokenUsage(int(u["input_tokens"]), int(u["output_tokens"]))
        except KeyError as exc:
            raise ConfigError(f"usage row lacks {exc.args[0]!r}") from None
        if model not in priced and not strict:
            continue
        reports.append(cost_of(tokens, model, mode, pricing, prompt_id=str(u.get("prompt_id", ""))))
    return reports


def _cost_json(reports) -> str:
    total = sum((r.total for r in reports), start=0)
    return json.dumps({"runs": [r.to_dict() for r in reports], "total_exact": str(total)},
                      indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------


def run(config: RunConfig) -> RunRecord:
    """Execute one approach end to end and write its artifacts under ``config.out``."""
    config.validate()
    started = _now()
    manifest = ingest_manifest(config.manifest, config.format)
    if not manifest.labeled():
        raise DataError(f"{config.manifest}: no labeled records to evaluate")
    pricing = load_pricing(config.pricing) if config.pricing else None
    ctx = RunContext(config, manifest)
    try:
        reports = RUNNERS[config.approach](ctx, ctx.resolved)
    finally:
        ctx.close()
    ctx.write("report.json", render_report(reports, "json"))
    ctx.write("report.md", render_report(reports, "markdown-table"))
    ctx.write("report.csv", render_report(reports, "csv"))
    usage = usage_summary(ctx)
    ctx.write("usage.json", json.dumps(usage, indent=2, sort_keys=True) + "\n")
    if pricing is not None:
        ctx.write("cost.json", _cost_json(price_usage(usage, pricing)))
    if ctx.request_log.exists():
        ctx.artifacts.append("requests.jsonl")
    record = RunRecord(
        config=config.to_dict(),
        input_hash=manifest.content_hash(),
        started=started,
        finished=_now(),
        artifacts=sorted(set(ctx.artifacts)),
        backend_fixture=ctx.mock.fixture.name if ctx.mock else None,
    )
    record.save(ctx.out / "run_record.json")
    return record


def replay(record: RunRecord | str | Path, out: str | Path | None = None) -> RunRecord:
    """Re-run a recorded configuration, refusing if the manifest content changed."""
    if not isinstance(record, RunRecord):
        record = RunRecord.load(record)
    cfg = RunConfig.from_dict(record.config)
    if out is not None:
        cfg.out = str(out)
    current = ingest_manifest(cfg.manifest, cfg.format).content_hash()
    if current != record.input_hash:
        raise DataError(f"manifest {cfg.manifest} changed since the recorded run "
                        f"({current[:12]} != {record.input_hash[:12]})")
    return run(cfg)


# ---------------------------------------------------------------------------
# cross-run comparison


def load_run(run_dir: str | Path) -> tuple[RunRecord, list[MetricsReport]]:
    run_dir = Path(run_dir)
    record = RunRecord.load(run_dir / "run_record.json")
    return record, load_reports((run_dir / "report.json").read_text(encoding="utf-8"))


def _model_of(record: RunRecord) -> str:
    approach = record.config["approach"]
    role = ROLES[approach][-1] if approach != "discover" else "text_embed"
    ep = record.config.get("endpoints", {}).get(role, {})
    if "model_id" in ep:
        return ep["model_id"]
    if record.backend_fixture:
        return f"{record.backend_fixture}/{role}"
    return "?"


def compare_runs(runs: Sequence[tuple[RunRecord, list[MetricsReport]]]) -> str:
    """Markdown comparison: one overall table and one class-specific table."""
    if not runs:
        raise ValueError("need at least one run to report")
    rows = [(rec, rep) for rec, reps in runs for rep in reps]
    lines = ["# Cross-approach comparison", ""]
    hashes = sorted({rec.input_hash for rec, _ in runs})
    if len(hashes) > 1:
        lines += ["> **Warning:** these runs used different manifests "
                  f"({len(hashes)} distinct input hashes); their rows are not comparable.", ""]
    best = max(rep.accuracy for _, rep in rows)

    def cell(value: float, bold: bool) -> str:
        return f"**{value:.2f}**" if bold else f"{value:.2f}"

    lines += ["| Method | Model | Precision | Recall | Accuracy |", "|---|---|---:|---:|---:|"]
    for rec, rep in rows:
        top = round(rep.accuracy, 2) == round(best, 2)
        method = re.sub(r"\s*\([^)]*\)", "", rep.label) if rep.label else rec.config["approach"]
        name = f"**{method}**" if top else method
        lines.append(f"| {name} | {_model_of(rec)} | {cell(rep.precision, top)} | "
                     f"{cell(rep.recall, top)} | {cell(rep.accuracy, top)} |")
    classes = rows[0][1].confusion.classes
    lines += ["", "## Class-specific accuracy", "",
              "| Method | " + " | ".join(c.value for c in classes) + " |",
              "|---|" + "---:|" * len(classes)]
    col_best = {c: max(rep.per_class.get(c, 0.0) for _, rep in rows) for c in classes}
    for rec, rep in rows:
        method = rep.label or rec.config["approach"]
        cells = []
        for c in classes:
            v = rep.per_class.get(c)
            cells.append("-" if v is None else cell(v, round(v, 2) == round(col_best[c], 2)))
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    flagged = [(rep.label, rep.flags) for _, rep in rows if rep.flags]
    if flagged:
        lines += ["", "## Notes", ""]
        lines += [f"- {label}: {', '.join(flags)}" for label, flags in flagged]
    return "\n".join(lines) + "\n"


def write_comparison(run_dirs: Sequence[str | Path], out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    path = out / "comparison.md"
    path.write_text(compare_runs(runs), encoding="utf-8")
    return path


__all__ = [
    "APPROACHES", "DEFAULT_PARAMS", "ROLES", "RunConfig", "RunContext", "RunRecord",
    "compare_runs", "load_run", "price_usage", "replay", "run", "write_comparison",
]
