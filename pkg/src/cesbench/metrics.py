"""Macro-averaged classification metrics and confusion matrices."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyClass, ItemMismatch

SCHEMA_VERSION = "cesbench.metrics/1"


class _Unresolved:
    """Prediction placeholder for responses that named no class (or NOISE items)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Unresolved"

    def __reduce__(self):
        return (_Unresolved, ())


UNRESOLVED = _Unresolved()


def _label_name(c) -> str:
    return getattr(c, "value", str(c))


@dataclass
class ConfusionMatrix:
    """Rows are truth, columns predictions; an extra last column counts Unresolved."""

    classes: tuple
    counts: np.ndarray
    unresolved: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.unresolved.sum())

    @property
    def has_unresolved(self) -> bool:
        return bool(self.unresolved.any())

    def as_rows(self) -> list[list[int]]:
        rows = []
        for i in range(len(self.classes)):
            row = [int(v) for v in self.counts[i]]
            if self.has_unresolved:
                row.append(int(self.unresolved[i]))
            rows.append(row)
        return rows


@dataclass
class MetricsReport:
    """Percent-valued metrics; values stay unrounded, rendering rounds to 2 decimals."""

    precision: float
    recall: float
    accuracy: float
    per_class: dict
    confusion: ConfusionMatrix
    n_items: int
    flags: list[str] = field(default_factory=list)
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "label": self.label,
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "per_class": {_label_name(c): v for c, v in self.per_class.items()},
            "classes": [_label_name(c) for c in self.confusion.classes],
            "confusion": self.confusion.counts.tolist(),
            "unresolved": self.confusion.unresolved.tolist(),
            "n_items": self.n_items,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, obj: Mapping, resolve=None) -> "MetricsReport":
        """Inverse of ``to_dict``; ``resolve`` maps class names back to labels."""
        resolve = resolve or _default_resolver
        classes = tuple(resolve(n) for n in obj["classes"])
        confusion = ConfusionMatrix(
            classes,
            np.array(obj["confusion"], dtype=np.int64).reshape(len(classes), len(classes)),
            np.array(obj["unresolved"], dtype=np.int64),
        )
        return cls(
            precision=float(obj["precision"]),
            recall=float(obj["recall"]),
            accuracy=float(obj["accuracy"]),
            per_class={resolve(k): float(v) for k, v in obj["per_class"].items()},
            confusion=confusion,
            n_items=int(obj["n_items"]),
            flags=list(obj.get("flags", [])),
            label=obj.get("label", ""),
        )


def _default_resolver(name: str):
    from .dataset import CesClass

    try:
        return CesClass(name)
    except ValueError:
        return name


def compute(
    preds: Iterable[tuple[str, Hashable]],
    truth: Iterable[tuple[str, Hashable]],
    classes: Sequence | None = None,
    label: str = "",
) -> MetricsReport:
    """Score predictions against ground truth.

    ``preds`` may contain ``UNRESOLVED``; such items are never true positives
    and are not counted against any class's precision. A class that is never
    predicted contributes 0 to macro precision and the report is flagged.
    """
    pred_map = dict(preds)
    truth_map = dict(truth)
    if set(pred_map) != set(truth_map):
        missing = set(truth_map) - set(pred_map)
        extra = set(pred_map) - set(truth_map)
        raise ItemMismatch(f"{len(missing)} items lack predictions, {len(extra)} predictions lack truth")
    if classes is None:
        from .dataset import TAXONOMY

        classes = TAXONOMY
    classes = tuple(classes)
    pos = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    counts = np.zeros((k, k), dtype=np.int64)
    unresolved = np.zeros(k, dtype=np.int64)
    for item, t in truth_map.items():
        if t not in pos:
            raise ItemMismatch(f"truth label {t!r} for {item!r} is not in the class list")
        p = pred_map[item]
        if p is UNRESOLVED or p is None:
            unresolved[pos[t]] += 1
        elif p in pos:
            counts[pos[t], pos[p]] += 1
        else:
            raise ItemMismatch(f"prediction {p!r} for {item!r} is not in the class list")
    cm = ConfusionMatrix(classes, counts, unresolved)
    return _report_from_confusion(cm, label=label)


def _report_from_confusion(cm: ConfusionMatrix, label: str = "", flags: Sequence[str] = ()) -> MetricsReport:
    counts = cm.counts
    total = cm.total
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1) + cm.unresolved
    flags = list(flags)
    precisions, recalls = [], []
    per_class = {}
    for i, c in enumerate(cm.classes):
        if predicted[i] == 0:
            precisions.append(0.0)
            flags.append(f"precision_undefined:{_label_name(c)}")
        else:
            precisions.append(tp[i] / predicted[i])
        if actual[i] == 0:
            recalls.append(0.0)
            flags.append(f"recall_undefined:{_label_name(c)}")
        else:
            recalls.append(tp[i] / actual[i])
            per_class[c] = 100.0 * tp[i] / actual[i]
    if cm.has_unresolved:
        flags.append(f"unresolved:{int(cm.unresolved.sum())}")
    accuracy = 100.0 * tp.sum() / total if total else 0.0
    return MetricsReport(
        precision=100.0 * math.fsum(precisions) / len(precisions),
        recall=100.0 * math.fsum(recalls) / len(recalls),
        accuracy=float(accuracy),
        per_class=per_class,
        confusion=cm,
        n_items=total,
        flags=flags,
        label=label,
    )


def per_class_accuracy(report: MetricsReport) -> dict:
    """Row-normalised diagonal (per-class recall), in percent."""
    cm = report.confusion
    out = {}
    for i, c in enumerate(cm.classes):
        support = cm.counts[i].sum() + cm.unresolved[i]
        if support == 0:
            raise EmptyClass(f"class {_label_name(c)} does not occur in the ground truth")
        out[c] = 100.0 * cm.counts[i, i] / support
    return out


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_report(reports: Sequence[MetricsReport], format: str = "markdown-table") -> str:
    if format == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    if format in ("markdown", "markdown-table", "md"):
        lines = ["| Run | Precision | Recall | Accuracy |", "|---|---:|---:|---:|"]
        for r in reports:
            lines.append(f"| {r.label or '-'} | {_fmt(r.precision)} | {_fmt(r.recall)} | {_fmt(r.accuracy)} |")
        return "\n".join(lines) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        classes = reports[0].confusion.classes if reports else ()
        writer.writerow(["run", "precision", "recall", "accuracy", *[_label_name(c) for c in classes]])
        for r in reports:
            writer.writerow([r.label, _fmt(r.precision), _fmt(r.recall), _fmt(r.accuracy),
                             *[_fmt(r.per_class[c]) if c in r.per_class else "" for c in classes]])
        return buf.getvalue()
    raise ValueError(f"unknown report format {format!r}")


def load_reports(text: str) -> list[MetricsReport]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [MetricsReport.from_dict(d) for d in data]
