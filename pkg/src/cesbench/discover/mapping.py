from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from ..dataset import TAXONOMY, CesClass
from ..errors import UnlabeledRecord, UnmappedCluster, UnresolvedCluster
from ..metrics import UNRESOLVED, MetricsReport, compute
from ..prompting import extract_class
from .bow import BagOfWords
from .cluster import NOISE, ClusterAssignment


class Labeler(Protocol):
    def zero_shot_label(self, candidates: Sequence[str], evidence: str): ...


@dataclass
class ClusterClassMap:
    mapping: dict[int, CesClass]
    provenance: dict[int, str] = field(default_factory=dict)
    match_kinds: dict[int, str] = field(default_factory=dict)
    unresolved: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            str(k): {"class": v.value, "raw": self.provenance.get(k, ""), "match": self.match_kinds.get(k, "")}
            for k, v in sorted(self.mapping.items())
        } | {str(k): {"class": None, "raw": raw, "match": "unresolved"} for k, raw in sorted(self.unresolved.items())}

    def shared_classes(self) -> dict[CesClass, list[int]]:
        """Classes that more than one cluster mapped to."""
        seen: dict[CesClass, list[int]] = {}
        for k, v in sorted(self.mapping.items()):
            seen.setdefault(v, []).append(k)
        return {c: ks for c, ks in seen.items() if len(ks) > 1}


def map_clusters(
    bows: Sequence[BagOfWords],
    labeler: Labeler,
    taxonomy: Sequence[CesClass] = TAXONOMY,
    strict: bool = True,
) -> ClusterClassMap:
    """Ask ``labeler`` which class each cluster's keywords describe.

    Every cluster is queried, even with a single candidate class, so the raw
    responses form a complete audit trail. With ``strict`` the first cluster
    whose answer names no class raises ``UnresolvedCluster`` after all clusters
    have been queried.
    """
    if not bows:
        raise ValueError("no bags of words to map")
    names = [c.display_name for c in taxonomy]
    out = ClusterClassMap({})
    for bow in bows:
        evidence = ", ".join(bow.keywords)
        resp = labeler.zero_shot_label(names, evidence)
        decision = extract_class(resp.text, taxonomy, item_id=f"cluster:{bow.cluster}")
        if decision.predicted is UNRESOLVED:
            out.unresolved[bow.cluster] = resp.text
        else:
            out.mapping[bow.cluster] = decision.predicted
            out.provenance[bow.cluster] = resp.text
            out.match_kinds[bow.cluster] = decision.match_kind
    if strict and out.unresolved:
        label = min(out.unresolved)
        raise UnresolvedCluster(label, out.unresolved[label])
    return out


def evaluate_discovery(
    assignment: ClusterAssignment,
    mapping: ClusterClassMap | Mapping[int, CesClass],
    truth: Mapping[str, CesClass],
    taxonomy: Sequence[CesClass] = TAXONOMY,
    label: str = "",
) -> MetricsReport:
    """Score cluster-derived predictions.

    NOISE items, and items of clusters the labeler could not resolve, are
    wrong for accuracy and recall but never enter any class's precision
    denominator.
    """
    table = mapping.mapping if isinstance(mapping, ClusterClassMap) else dict(mapping)
    unresolved = set(mapping.unresolved) if isinstance(mapping, ClusterClassMap) else set()
    preds = []
    for item, lab in zip(assignment.item_ids, assignment.labels):
        lab = int(lab)
        if lab == NOISE or lab in unresolved:
            preds.append((item, UNRESOLVED))
        elif lab in table:
            preds.append((item, table[lab]))
        else:
            raise UnmappedCluster(f"cluster {lab} has no class mapping")
    missing = [i for i in assignment.item_ids if i not in truth]
    if missing:
        raise UnlabeledRecord(missing[0])
    report = compute(preds, [(i, truth[i]) for i in assignment.item_ids], classes=taxonomy, label=label)
    if assignment.n_noise:
        report.flags.append("noise_excluded_from_precision")
        report.flags.append(f"noise:{assignment.n_noise}")
    if unresolved:
        report.flags.append(f"unresolved_clusters:{len(unresolved)}")
    return report
