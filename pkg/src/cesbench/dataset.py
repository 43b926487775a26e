"""CES taxonomy, manifest ingestion and deterministic data partitions."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DuplicateId,
    InsufficientClassSize,
    MalformedRow,
    UnknownLabel,
    UnlabeledRecord,
)


def normalize_label(text: str) -> str:
    """Lowercase, unify ``-``/``_``/whitespace runs to one space, strip edge punctuation."""
    text = re.sub(r"[-_\s]+", " ", text.strip().lower())
    return text.strip(" .,;:!?\"'()[]{}*`")


class CesClass(enum.Enum):
    CulturalReligious = "Cultural-Religious"
    FaunaFlora = "Fauna-Flora"
    Gastronomy = "Gastronomy"
    LandscapeNature = "Landscape-Nature"
    Sports = "Sports"
    UrbanRural = "Urban-Rural"

    @property
    def display_name(self) -> str:
        return self.value

    @property
    def aliases(self) -> tuple[str, ...]:
        return _ALIASES[self]

    @classmethod
    def from_label(cls, text: str) -> "CesClass":
        """Resolve a canonical name, member name or alias. Raises ``KeyError``."""
        return ALIAS_TABLE[normalize_label(text)]

    def __str__(self) -> str:
        return self.value


_ALIASES: dict[CesClass, tuple[str, ...]] = {
    CesClass.CulturalReligious: (
        "cultural religious", "culturalreligious", "cultural and religious",
        "cultural religion", "culture religion", "cultural", "religious",
    ),
    CesClass.FaunaFlora: (
        "fauna flora", "faunaflora", "fauna and flora", "flora fauna",
        "flora and fauna", "fauna", "flora",
    ),
    CesClass.Gastronomy: ("gastronomy", "gastronomic", "gastronomical"),
    CesClass.LandscapeNature: (
        "landscape nature", "landscapenature", "landscape and nature",
        "landscapes nature", "landscape", "landscapes", "nature",
    ),
    CesClass.Sports: ("sports", "sport"),
    CesClass.UrbanRural: (
        "urban rural", "urbanrural", "urban and rural", "urban", "rural",
    ),
}

ALIAS_TABLE: dict[str, CesClass] = {}
for _cls, _names in _ALIASES.items():
    for _name in _names:
        if _name in ALIAS_TABLE:
            raise RuntimeError(f"alias {_name!r} is ambiguous")
        ALIAS_TABLE[_name] = _cls

TAXONOMY: tuple[CesClass, ...] = tuple(CesClass)


@dataclass(frozen=True)
class ImageRecord:
    id: str
    source: str
    label: CesClass | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be non-empty")
        if not self.source:
            raise ValueError(f"record {self.id!r}: source must be non-empty")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    name: str = "manifest"
    version: str = "1"
    taxonomy: tuple[CesClass, ...] = TAXONOMY

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "taxonomy", tuple(self.taxonomy))
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise DuplicateId(rec.id)
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.records)

    def labeled(self) -> list[ImageRecord]:
        return [r for r in self.records if r.label is not None]

    def by_class(self) -> dict[CesClass, list[ImageRecord]]:
        out: dict[CesClass, list[ImageRecord]] = {c: [] for c in self.taxonomy}
        for rec in self.records:
            if rec.label is not None:
                out.setdefault(rec.label, []).append(rec)
        return out

    def class_counts(self) -> dict[CesClass, int]:
        return {c: len(v) for c, v in self.by_class().items()}

    @property
    def balanced(self) -> bool:
        if not self.records or any(r.label is None for r in self.records):
            return False
        return len(set(self.class_counts().values())) == 1

    def get(self, item_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.id == item_id:
                return rec
        raise KeyError(item_id)

    def content_hash(self) -> str:
        """SHA-256 over the serialized JSON-lines form; stable across runs."""
        return hashlib.sha256(dumps_manifest(self, "jsonl").encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 42
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie strictly in (0, 1), got {self.test_fraction}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SupportQueryPartition:
    shots: int
    support: dict[CesClass, list[ImageRecord]]
    query: list[ImageRecord]
    seed: int

    def support_records(self) -> list[ImageRecord]:
        return [r for recs in self.support.values() for r in recs]


# ---------------------------------------------------------------------------
# ingestion / serialization

_HEADER_RE = re.compile(r"^#\s*cesbench-manifest\s+name=(\S*)\s+version=(\S*)\s*$")


def _parse_label(value, line: int) -> CesClass | None:
    if value is None:
        return None
    value = str(value)
    if not value.strip():
        return None
    try:
        return CesClass.from_label(value)
    except KeyError:
        raise UnknownLabel(value, line) from None


def _make_record(obj: Mapping, line: int) -> ImageRecord:
    item_id = obj.get("id")
    source = obj.get("source")
    if item_id is None or str(item_id).strip() == "":
        raise MalformedRow(line, "missing id")
    if source is None or str(source).strip() == "":
        raise MalformedRow(line, "missing source")
    label = _parse_label(obj.get("label"), line)
    meta = {}
    extra = obj.get("metadata")
    if isinstance(extra, Mapping):
        meta.update({str(k): str(v) for k, v in extra.items()})
    for k, v in obj.items():
        if k in ("id", "source", "label", "metadata") or v is None or v == "":
            continue
        meta[str(k)] = str(v)
    return ImageRecord(str(item_id), str(source), label, meta)


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    raise ConfigError(f"cannot infer manifest format from {path.name!r}; pass format explicitly")


def loads_manifest(text: str, format: str, name: str = "manifest", version: str = "1") -> DatasetManifest:
    if format not in ("csv", "jsonl", "json-lines"):
        raise ConfigError(f"unknown manifest format {format!r}")
    records: list[ImageRecord] = []
    seen: set[str] = set()

    def add(rec: ImageRecord):
        if rec.id in seen:
            raise DuplicateId(rec.id)
        seen.add(rec.id)
        records.append(rec)

    if format == "csv":
        lines = text.splitlines(keepends=True)
        offset = 0
        if lines and lines[0].startswith("#"):
            m = _HEADER_RE.match(lines[0].strip())
            if m:
                name, version = m.group(1), m.group(2)
            offset = 1
        reader = csv.DictReader(io.StringIO("".join(lines[offset:])))
        if reader.fieldnames is None:
            raise MalformedRow(0, "no records")
        missing = {"id", "source"} - set(reader.fieldnames)
        if missing:
            raise MalformedRow(1 + offset, f"header lacks {sorted(missing)}")
        for row in reader:
            line = reader.line_num + offset
            if None in row:
                raise MalformedRow(line, "too many fields")
            add(_make_record(row, line))
    else:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedRow(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise MalformedRow(lineno, "expected a JSON object")
            if "manifest" in obj and "id" not in obj:
                header = obj["manifest"]
                name = str(header.get("name", name))
                version = str(header.get("version", version))
                continue
            add(_make_record(obj, lineno))
    if not records:
        raise MalformedRow(0, "no records")
    return DatasetManifest(tuple(records), name=name, version=version)


def ingest_manifest(path: str | Path, format: str | None = None) -> DatasetManifest:
    """Read a CSV or JSON-lines manifest, preserving file order."""
    path = Path(path)
    fmt = format or _infer_format(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror or exc}") from None
    return loads_manifest(text, fmt, name=path.stem)


def dumps_manifest(manifest: DatasetManifest, format: str = "jsonl") -> str:
    if format == "csv":
        meta_keys = sorted({k for r in manifest.records for k in r.metadata})
        buf = io.StringIO()
        buf.write(f"# cesbench-manifest name={manifest.name} version={manifest.version}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "source", "label", *meta_keys])
        for r in manifest.records:
            writer.writerow([r.id, r.source, r.label.value if r.label else "",
                             *[r.metadata.get(k, "") for k in meta_keys]])
        return buf.getvalue()
    if format not in ("jsonl", "json-lines"):
        raise ConfigError(f"unknown manifest format {format!r}")
    lines = [json.dumps({"manifest": {"name": manifest.name, "version": manifest.version}})]
    for r in manifest.records:
        obj: dict = {"id": r.id, "source": r.source, "label": r.label.value if r.label else None}
        if r.metadata:
            obj["metadata"] = dict(sorted(r.metadata.items()))
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | Path, format: str | None = None) -> Path:
    path = Path(path)
    fmt = format or _infer_format(path)
    path.write_text(dumps_manifest(manifest, fmt), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# partitions


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(manifest: DatasetManifest, spec: SplitSpec) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Seeded train/test split; within each output list records keep manifest order.

    With ``stratified`` every class contributes ``round(test_fraction * n_class)``
    test records, classes being shuffled one after another in taxonomy order
    from a single generator.
    """
    rng = np.random.default_rng(spec.seed)
    index = {r.id: i for i, r in enumerate(manifest.records)}
    test_ids: set[str] = set()
    if spec.stratified:
        for rec in manifest.records:
            if rec.label is None:
                raise UnlabeledRecord(rec.id)
        groups = manifest.by_class()
        for cls in sorted(groups, key=_class_order(manifest)):
            members = groups[cls]
            n_test = _round_half_up(spec.test_fraction * len(members))
            perm = rng.permutation(len(members))
            test_ids.update(members[i].id for i in perm[:n_test])
    else:
        n_test = _round_half_up(spec.test_fraction * len(manifest.records))
        perm = rng.permutation(len(manifest.records))
        test_ids.update(manifest.records[i].id for i in perm[:n_test])
    train = [r for r in manifest.records if r.id not in test_ids]
    test = [r for r in manifest.records if r.id in test_ids]
    assert len(train) + len(test) == len(index)
    return train, test


def _class_order(manifest: DatasetManifest):
    order = {c: i for i, c in enumerate(manifest.taxonomy)}
    return lambda c: order.get(c, len(order))


def sample_support_set(
    manifest: DatasetManifest,
    shots: int,
    seed: int,
    max_shots: int = 10,
) -> SupportQueryPartition:
    """Draw ``shots`` support records per class uniformly without replacement.

    The query set is every other labeled record, in manifest order.
    """
    if not 1 <= shots <= max_shots:
        raise ConfigError(f"shots must lie in [1, {max_shots}], got {shots}")
    rng = np.random.default_rng(seed)
    groups = manifest.by_class()
    support: dict[CesClass, list[ImageRecord]] = {}
    for cls in manifest.taxonomy:
        members = groups.get(cls, [])
        if len(members) <= shots:
            raise InsufficientClassSize(cls, len(members), shots)
        picks = rng.choice(len(members), size=shots, replace=False)
        support[cls] = [members[i] for i in picks]
    chosen = {r.id for recs in support.values() for r in recs}
    query = [r for r in manifest.labeled() if r.id not in chosen]
    return SupportQueryPartition(shots=shots, support=support, query=query, seed=seed)


def synthetic_manifest(
    per_class: int = 160,
    classes: Sequence[CesClass] = TAXONOMY,
    root: str = "mock://images",
    name: str = "synthetic",
) -> DatasetManifest:
    """Balanced manifest with ids ``<class>-<n>``; sources are ``<root>/<id>.jpg``.

    The default ``mock://`` root marks images that exist only for the mock
    backend; clients forward such sources without reading a file.
    """
    records = []
    for cls in classes:
        for i in range(per_class):
            item_id = f"{cls.name}-{i:04d}"
            records.append(ImageRecord(item_id, f"{root}/{item_id}.jpg", cls))
    return DatasetManifest(tuple(records), name=name, taxonomy=tuple(classes))


def labels_of(records: Iterable[ImageRecord]) -> dict[str, CesClass]:
    return {r.id: r.label for r in records if r.label is not None}
