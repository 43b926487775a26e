from .cache import EmbeddingCache, cache_get_or_compute, cache_key
from .vectors import EmbeddingVector, class_prototype, cosine_similarity, softmax

__all__ = [
    "EmbeddingCache",
    "EmbeddingVector",
    "cache_get_or_compute",
    "cache_key",
    "class_prototype",
    "cosine_similarity",
    "softmax",
]
