from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from ..errors import DimensionMismatch, EmptyClass, EmptyInput, ZeroNormVector

Modality = Literal["image", "text"]


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A dense embedding held as a read-only float64 array."""

    item_id: str
    modality: str
    model_id: str
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size == 0:
            raise EmptyInput(f"embedding for {self.item_id!r} is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"embedding for {self.item_id!r} has non-finite entries")
        if self.modality not in ("image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dims(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.modality == other.modality
            and self.model_id == other.model_id
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.item_id, self.modality, self.model_id, self.values.tobytes()))

    def with_values(self, values, item_id: str | None = None) -> "EmbeddingVector":
        return EmbeddingVector(item_id or self.item_id, self.modality, self.model_id, values)


def _as_array(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.values
    return np.asarray(v, dtype=np.float64).reshape(-1)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; zero-norm inputs are an error."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"dims {x.shape[0]} != {y.shape[0]}")
    nx = float(np.sqrt(np.dot(x, x)))
    ny = float(np.sqrt(np.dot(y, y)))
    if nx == 0.0 or ny == 0.0:
        raise ZeroNormVector("cosine similarity of a zero-norm vector")
    value = float(np.dot(x, y)) / (nx * ny)
    return min(1.0, max(-1.0, value))


def softmax(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise EmptyInput("softmax of an empty score vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("softmax scores must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()


def class_prototype(
    members: Iterable[EmbeddingVector],
    prototype_id: str | None = None,
    normalize: bool = False,
) -> EmbeddingVector:
    """Element-wise mean of ``members``.

    With ``normalize`` each member is scaled to unit L2 norm before averaging.
    """
    members = list(members)
    if not members:
        raise EmptyClass("cannot build a prototype from zero members")
    first = members[0]
    for m in members[1:]:
        if m.dims != first.dims:
            raise DimensionMismatch(f"prototype members have dims {first.dims} and {m.dims}")
        if m.model_id != first.model_id or m.modality != first.modality:
            raise DimensionMismatch("prototype members come from different embedding spaces")
    stack = np.stack([m.values for m in members])
    if normalize:
        norms = np.linalg.norm(stack, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ZeroNormVector("cannot normalize a zero-norm prototype member")
        stack = stack / norms
    # fsum is exactly rounded, so the mean does not depend on member order
    mean = np.array([math.fsum(col) for col in stack.T]) / len(members)
    pid = prototype_id or "prototype:" + ",".join(sorted(m.item_id for m in members))
    return EmbeddingVector(pid, first.modality, first.model_id, mean)
