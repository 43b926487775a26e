"""Clients for external model-serving endpoints plus a deterministic mock."""

from .batching import BatchRun, chunked, run_batched
from .client import EndpointEmbedder, ModelClient, encode_image, parse_numbered_lines
from .mock import FIXTURE_VERSION, MockBackend, MockFixture, parse_backend
from .ratelimit import RateLimiter
from .types import (
    Caption,
    ChunkResult,
    EndpointConfig,
    ItemError,
    RawModelResponse,
    TokenUsage,
    load_endpoints,
    total_usage,
)

__all__ = [
    "BatchRun", "Caption", "ChunkResult", "EndpointConfig", "EndpointEmbedder", "FIXTURE_VERSION",
    "ItemError", "MockBackend", "MockFixture", "ModelClient", "RateLimiter", "RawModelResponse",
    "TokenUsage", "chunked", "encode_image", "load_endpoints", "parse_backend",
    "parse_numbered_lines", "run_batched", "total_usage",
]
