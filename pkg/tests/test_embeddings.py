from __future__ import annotations

import math
import threading

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cesbench.dataset import ImageRecord
from cesbench.embeddings import (
    EmbeddingCache,
    EmbeddingVector,
    cache_get_or_compute,
    cache_key,
    class_prototype,
    cosine_similarity,
    softmax,
)
from cesbench.embeddings.cache import content_id
from cesbench.errors import CacheCorrupt, DimensionMismatch, EmptyClass, EmptyInput, ZeroNormVector


def vec(values, item_id="x", model_id="m", modality="image"):
    return EmbeddingVector(item_id, modality, model_id, values)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)

# ---------------------------------------------------------------------------
# EmbeddingVector


def test_vector_is_read_only_copy():
    src = np.array([1.0, 2.0])
    v = vec(src)
    src[0] = 99.0
    assert v.values[0] == 1.0
    with pytest.raises(ValueError):
        v.values[0] = 5.0


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [float("inf")]])
def test_vector_rejects_empty_or_non_finite(bad):
    with pytest.raises((EmptyInput, ValueError)):
        vec(bad)


def test_vector_rejects_unknown_modality():
    with pytest.raises(ValueError):
        vec([1.0], modality="audio")


# ---------------------------------------------------------------------------
# cosine


def test_cosine_identity_and_orthogonal():
    a = vec([0.3, -1.2, 4.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([1, 0, 0], [0, 1, 0]) == pytest.approx(0.0, abs=1e-12)


def test_cosine_known_value_against_scalar_arithmetic():
    a, b = (1.0, 2.0, 3.0), (4.0, 5.0, 6.0)
    dot = 1 * 4 + 2 * 5 + 3 * 6
    oracle = dot / (math.sqrt(1 + 4 + 9) * math.sqrt(16 + 25 + 36))
    assert oracle == pytest.approx(0.974631846, abs=1e-9)
    assert cosine_similarity(a, b) == pytest.approx(oracle, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ZeroNormVector):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       st.floats(0.01, 100.0))
def test_cosine_properties(a, b, scale):
    assume(np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6)
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert c == pytest.approx(cosine_similarity(scale * a, b), abs=1e-9)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_values():
    assert np.allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    e = [math.exp(1), math.exp(2), math.exp(3)]
    oracle = [x / sum(e) for x in e]
    assert np.allclose(softmax([1, 2, 3]), oracle, atol=1e-12)
    assert np.allclose(softmax([1, 2, 3]), [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_extreme_scores_stay_finite():
    p = softmax([1000.0, 0.0, -1000.0])
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


def test_softmax_errors():
    with pytest.raises(EmptyInput):
        softmax([])
    with pytest.raises(ValueError):
        softmax([1.0, float("nan")])


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=8), st.floats(-500, 500))
def test_softmax_is_a_distribution_and_shift_invariant(scores, k):
    p = softmax(scores)
    assert np.all(p >= 0) and math.isclose(float(p.sum()), 1.0, abs_tol=1e-12)
    assert np.allclose(p, softmax([s + k for s in scores]), atol=1e-9)


# ---------------------------------------------------------------------------
# prototypes


def test_prototype_single_member_and_midpoint():
    v = vec([1.5, -2.0])
    assert np.array_equal(class_prototype([v]).values, v.values)
    mid = class_prototype([vec([0.0, 0.0], "a"), vec([2.0, 2.0], "b")])
    assert np.array_equal(mid.values, [1.0, 1.0])


def test_prototype_matches_summation_oracle():
    rng = np.random.default_rng(3)
    rows = rng.standard_normal((5, 7))
    proto = class_prototype([vec(r, f"i{k}") for k, r in enumerate(rows)])
    oracle = [sum(rows[k, j] for k in range(5)) / 5 for j in range(7)]
    assert np.allclose(proto.values, oracle, atol=1e-12, rtol=0)


def test_prototype_normalize_option():
    proto = class_prototype([vec([3.0, 0.0], "a"), vec([0.0, 10.0], "b")], normalize=True)
    assert np.allclose(proto.values, [0.5, 0.5])
    with pytest.raises(ZeroNormVector):
        class_prototype([vec([0.0, 0.0], "a")], normalize=True)


def test_prototype_errors():
    with pytest.raises(EmptyClass):
        class_prototype([])
    with pytest.raises(DimensionMismatch):
        class_prototype([vec([1.0], "a"), vec([1.0, 2.0], "b")])
    with pytest.raises(DimensionMismatch):
        class_prototype([vec([1.0], "a", model_id="m1"), vec([1.0], "b", model_id="m2")])


@settings(max_examples=60, deadline=None)
@given(st.lists(arrays(np.float64, 4, elements=finite), min_size=1, max_size=10), st.randoms())
def test_prototype_is_order_independent(rows, rnd):
    members = [vec(r, f"i{k}") for k, r in enumerate(rows)]
    shuffled = members[:]
    rnd.shuffle(shuffled)
    assert np.array_equal(class_prototype(members).values, class_prototype(shuffled).values)


# ---------------------------------------------------------------------------
# cache


class CountingEmbedder:
    def __init__(self, model_id="m", modality="text", dims=4):
        self.model_id, self.modality, self.dims = model_id, modality, dims
        self.calls = 0
        self.lock = threading.Lock()

    def embed(self, item):
        with self.lock:
            self.calls += 1
        ident = item if isinstance(item, str) else item.id
        seed = sum(ident.encode())
        return EmbeddingVector(ident, self.modality, self.model_id, np.random.default_rng(seed).standard_normal(self.dims))


def test_second_lookup_does_not_call_backend(tmp_path):
    cache = EmbeddingCache(tmp_path)
    emb = CountingEmbedder()
    a = cache_get_or_compute(cache, "a stone church", emb)
    b = cache_get_or_compute(cache, "a stone church", emb)
    assert emb.calls == 1 and a == b


def test_cache_persists_across_instances(tmp_path):
    emb = CountingEmbedder()
    first = cache_get_or_compute(EmbeddingCache(tmp_path), "lake", emb)
    again = cache_get_or_compute(EmbeddingCache(tmp_path), "lake", emb)
    assert emb.calls == 1 and np.array_equal(first.values, again.values)


def test_keys_distinguish_model_modality_and_tag():
    keys = {cache_key("item", "m1", "image"), cache_key("item", "m2", "image"),
            cache_key("item", "m1", "text"), cache_key("item", "m1", "image", tag="v2")}
    assert len(keys) == 4


def test_corrupt_record_raises_then_repairs(tmp_path):
    cache = EmbeddingCache(tmp_path)
    emb = CountingEmbedder()
    cache_get_or_compute(cache, "fox", emb)
    raw = bytearray((tmp_path / "vectors.bin").read_bytes())
    raw[3] ^= 0xFF
    (tmp_path / "vectors.bin").write_bytes(bytes(raw))
    fresh = EmbeddingCache(tmp_path)
    with pytest.raises(CacheCorrupt):
        cache_get_or_compute(fresh, "fox", emb)
    fixed = cache_get_or_compute(fresh, "fox", emb, repair=True)
    assert emb.calls == 2
    assert cache_get_or_compute(EmbeddingCache(tmp_path), "fox", emb) == fixed


def test_truncated_log_is_corrupt(tmp_path):
    cache = EmbeddingCache(tmp_path)
    cache_get_or_compute(cache, "fox", CountingEmbedder())
    (tmp_path / "vectors.bin").write_bytes(b"\x00" * 5)
    with pytest.raises(CacheCorrupt):
        cache_get_or_compute(EmbeddingCache(tmp_path), "fox", CountingEmbedder())


def test_records_keyed_by_id_or_content(tmp_path):
    img = tmp_path / "a.jpg"
    img.write_bytes(b"pixels")
    rec1 = ImageRecord("one", str(img))
    rec2 = ImageRecord("two", str(img))
    emb = CountingEmbedder(modality="image")
    cache_get_or_compute(EmbeddingCache(tmp_path / "loose"), rec1, emb)
    cache_get_or_compute(EmbeddingCache(tmp_path / "loose"), rec2, emb)
    assert emb.calls == 2  # keyed by record id
    strict = EmbeddingCache(tmp_path / "strict", strict=True)
    cache_get_or_compute(strict, rec1, emb)
    cache_get_or_compute(strict, rec2, emb)
    assert emb.calls == 3  # same bytes, same key


def test_concurrent_callers_compute_once(tmp_path):
    cache = EmbeddingCache(tmp_path)
    emb = CountingEmbedder()
    results = []
    threads = [threading.Thread(target=lambda: results.append(cache_get_or_compute(cache, "same", emb)))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert emb.calls == 1 and len({r.values.tobytes() for r in results}) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=20), min_size=1, max_size=15, unique=True))
def test_cache_round_trip_is_bit_exact(tmp_path_factory, texts):
    root = tmp_path_factory.mktemp("cache")
    cache = EmbeddingCache(root)
    emb = CountingEmbedder(dims=6)
    stored = {t: cache_get_or_compute(cache, t, emb) for t in texts}
    reread = EmbeddingCache(root)
    for t, v in stored.items():
        assert reread.get(cache_key(content_id(t), "m", "text")).values.tobytes() == v.values.tobytes()
