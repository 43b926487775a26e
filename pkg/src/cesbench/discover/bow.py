from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

from ..errors import EmptyCluster

TOP_N = 10
MIN_TOKEN_LEN = 3


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files("cesbench").joinpath("discover", "stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def tokenize(text: str, stop: Iterable[str] | None = None) -> list[str]:
    stop = stopwords() if stop is None else frozenset(stop)
    return [t for t in re.findall(r"[^\W_]+", text.lower()) if len(t) >= MIN_TOKEN_LEN and t not in stop]


@dataclass(frozen=True)
class BagOfWords:
    cluster: int
    words: tuple[tuple[str, float], ...]
    tf_only: bool = False

    @property
    def keywords(self) -> list[str]:
        return [w for w, _ in self.words]

    def to_dict(self) -> dict:
        return {"cluster": self.cluster, "tf_only": self.tf_only,
                "words": [{"word": w, "score": s} for w, s in self.words]}


def build_bow(
    captions_by_cluster: Mapping[int, Sequence[str]],
    top_n: int = TOP_N,
    stop: Iterable[str] | None = None,
) -> list[BagOfWords]:
    """Top TF-IDF words per cluster, treating each cluster's captions as one document.

    TF is the count of a word over the cluster's token total, IDF is
    ``ln(n_clusters / clusters_containing_word)``. With a single cluster every
    IDF is zero, so words are ranked by TF and the bag is marked ``tf_only``.
    Equal scores are ordered alphabetically.
    """
    counts: dict[int, Counter] = {}
    for label, caps in captions_by_cluster.items():
        if not caps:
            raise EmptyCluster(f"cluster {label} has no captions")
        counts[label] = Counter(tok for c in caps for tok in tokenize(c, stop))
    n_clusters = len(counts)
    df = Counter(w for c in counts.values() for w in c)
    tf_only = n_clusters == 1
    out = []
    for label in sorted(counts):
        c = counts[label]
        total = sum(c.values())
        scored = []
        for word, cnt in c.items():
            tf = cnt / total
            score = tf if tf_only else tf * math.log(n_clusters / df[word])
            scored.append((word, score))
        scored.sort(key=lambda ws: (-ws[1], ws[0]))
        out.append(BagOfWords(label, tuple(scored[:top_n]), tf_only))
    return out
