from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from ..errors import ConfigError


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0
    request_count: int = 0

    def __post_init__(self):
        if min(self.input_tokens, self.output_tokens, self.request_count) < 0:
            raise ValueError("token usage counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.request_count + other.request_count,
        )

    def to_dict(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens,
                "request_count": self.request_count}


def total_usage(usages) -> TokenUsage:
    out = TokenUsage()
    for u in usages:
        out = out + u
    return out


@dataclass(frozen=True)
class Caption:
    item_id: str
    text: str
    model_id: str
    usage: TokenUsage = TokenUsage()

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"caption for {self.item_id!r} is empty")


@dataclass(frozen=True)
class RawModelResponse:
    item_id: str
    text: str
    usage: TokenUsage = TokenUsage()
    latency: float = 0.0  # milliseconds


@dataclass(frozen=True)
class EndpointConfig:
    """One model-serving endpoint.

    ``api_key_env`` names the environment variable holding the key; it
    defaults to ``CESBENCH_API_KEY_<NAME>``. In ``no_batch`` mode the batch
    size is forced to 1.
    """

    name: str
    base_url: str
    model_id: str
    mode: str = "no_batch"
    batch_size: int | None = None
    api_key_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 5
    requests_per_minute: int | None = None
    max_in_flight: int = 1
    backoff_base: float = 1.0
    backoff_max: float = 60.0
    batch_api: str = "sync"
    poll_interval: float = 5.0
    dims: int | None = None
    max_tokens: int | None = 300
    temperature: float | None = 0.0

    def __post_init__(self):
        mode = self.mode.replace("-", "_").lower()
        if mode not in ("batch", "no_batch"):
            raise ConfigError(f"endpoint {self.name}: mode must be batch or no_batch")
        object.__setattr__(self, "mode", mode)
        if mode == "no_batch":
            if self.batch_size not in (None, 1):
                raise ConfigError(f"endpoint {self.name}: no_batch mode implies batch_size 1")
            object.__setattr__(self, "batch_size", 1)
        elif self.batch_size is None:
            object.__setattr__(self, "batch_size", 50)
        if self.batch_size < 1:
            raise ConfigError(f"endpoint {self.name}: batch_size must be >= 1")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise ConfigError(f"endpoint {self.name}: invalid retry/in-flight limits")
        if self.requests_per_minute is not None and self.requests_per_minute < 1:
            raise ConfigError(f"endpoint {self.name}: requests_per_minute must be >= 1")
        if self.batch_api not in ("sync", "async"):
            raise ConfigError(f"endpoint {self.name}: batch_api must be sync or async")
        if self.api_key_env is None:
            env = "CESBENCH_API_KEY_" + "".join(ch if ch.isalnum() else "_" for ch in self.name.upper())
            object.__setattr__(self, "api_key_env", env)

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) if self.api_key_env else None

    def with_mode(self, mode: str, batch_size: int | None = None) -> "EndpointConfig":
        return replace(self, mode=mode, batch_size=batch_size if mode.replace("-", "_") == "batch" else None)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, name: str, obj: Mapping) -> "EndpointConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"endpoint {name}: unknown keys {sorted(unknown)}")
        data = dict(obj)
        data.setdefault("name", name)
        for req in ("base_url", "model_id"):
            if req not in data:
                raise ConfigError(f"endpoint {name}: missing {req!r}")
        return cls(**data)


ENDPOINT_ROLES = ("vqa", "caption", "text_embed", "image_embed", "labeler")


def load_endpoints(path: str | Path) -> dict[str, EndpointConfig]:
    """Read ``{"endpoints": {role: {...}}}`` from a TOML or JSON file."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(raw.decode("utf-8"))
    else:
        import json

        data = json.loads(raw)
    section = data.get("endpoints", data)
    if not isinstance(section, Mapping):
        raise ConfigError(f"{path}: expected an 'endpoints' table")
    return {name: EndpointConfig.from_dict(name, obj) for name, obj in section.items()}


@dataclass
class ItemError:
    item_id: str
    error: BaseException
    index: int = -1

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "error": type(self.error).__name__, "message": str(self.error)}


@dataclass
class ChunkResult:
    """Per-item outcomes of one logical request plus its usage."""

    outcomes: list
    usage: TokenUsage = field(default_factory=TokenUsage)
