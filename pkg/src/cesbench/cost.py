"""Token-usage cost accounting.

Rates are held as integer micro-dollars per million tokens, so every cost
is an exact decimal (``tokens * rate / 10**12`` USD). Rounding happens only
when formatting for display.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, ROUND_HALF_EVEN, ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, UnknownPricing

MODES = ("batch", "no_batch")
_ROUNDING = {"down": ROUND_DOWN, "half_up": ROUND_HALF_UP, "half_even": ROUND_HALF_EVEN}
_FOUR = Decimal("0.0001")


def normalize_mode(mode: str) -> str:
    m = mode.strip().lower().replace("-", "_").replace(" ", "_")
    if m not in MODES:
        raise ConfigError(f"unknown execution mode {mode!r}; expected batch or no_batch")
    return m


def _to_micro(value) -> int:
    d = Decimal(str(value)) * 1_000_000
    if d != d.to_integral_value() or d < 0:
        raise ConfigError(f"price {value!r} must be a non-negative multiple of $0.000001")
    return int(d)


@dataclass(frozen=True)
class PricingEntry:
    model_id: str
    mode: str
    input_micro: int  # micro-USD per 1M input tokens
    output_micro: int
    effective: str = ""

    @property
    def input_usd_per_million(self) -> Decimal:
        return Decimal(self.input_micro).scaleb(-6)

    @property
    def output_usd_per_million(self) -> Decimal:
        return Decimal(self.output_micro).scaleb(-6)

    @classmethod
    def from_dict(cls, obj: dict) -> "PricingEntry":
        try:
            return cls(
                model_id=str(obj["model_id"]),
                mode=normalize_mode(obj["mode"]),
                input_micro=_to_micro(obj["input_usd_per_million"]),
                output_micro=_to_micro(obj["output_usd_per_million"]),
                effective=str(obj.get("effective", "")),
            )
        except KeyError as exc:
            raise ConfigError(f"pricing entry lacks {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "mode": self.mode,
            "input_usd_per_million": str(self.input_usd_per_million.normalize()),
            "output_usd_per_million": str(self.output_usd_per_million.normalize()),
            "effective": self.effective,
        }


@dataclass
class PricingTable:
    entries: list[PricingEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for e in self.entries:
            key = (e.model_id, e.mode)
            if key in seen:
                raise ConfigError(f"duplicate pricing entry for {key}")
            seen[key] = e
        self._by_key = seen
        for model in {e.model_id for e in self.entries}:
            b, nb = seen.get((model, "batch")), seen.get((model, "no_batch"))
            if b and nb and b.input_micro > nb.input_micro:
                raise ConfigError(f"{model}: batch input price exceeds no-batch input price")

    def lookup(self, model_id: str, mode: str) -> PricingEntry:
        try:
            return self._by_key[(model_id, normalize_mode(mode))]
        except KeyError:
            raise UnknownPricing(model_id, mode) from None

    @classmethod
    def from_json(cls, data) -> "PricingTable":
        if isinstance(data, dict):
            data = data.get("entries", data.get("pricing", []))
        return cls([PricingEntry.from_dict(d) for d in data])

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries], indent=2) + "\n"


def load_pricing(path: str | Path) -> PricingTable:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    return PricingTable.from_json(data)


def usd(tokens: int, micro_per_million: int) -> Decimal:
    """Exact USD for ``tokens`` at a micro-dollar-per-million rate."""
    return Decimal(tokens * micro_per_million).scaleb(-12)


def display(amount: Decimal, rounding: str = "down") -> str:
    try:
        mode = _ROUNDING[rounding]
    except KeyError:
        raise ConfigError(f"unknown rounding {rounding!r}") from None
    return str(amount.quantize(_FOUR, rounding=mode))


@dataclass(frozen=True)
class CostReport:
    model_id: str
    mode: str
    prompt_id: str
    input_tokens: int
    output_tokens: int
    input_cost: Decimal
    output_cost: Decimal
    input_rate_micro: int = 0
    output_rate_micro: int = 0

    @property
    def total(self) -> Decimal:
        return self.input_cost + self.output_cost

    def to_dict(self, rounding: str = "down") -> dict:
        return {
            "model_id": self.model_id,
            "mode": self.mode,
            "prompt_id": self.prompt_id,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "input_cost_usd": display(self.input_cost, rounding),
            "output_cost_usd": display(self.output_cost, rounding),
            "total_usd": display(self.total, rounding),
            "input_cost_exact": str(self.input_cost),
            "output_cost_exact": str(self.output_cost),
        }


def cost_of(usage, model_id: str, mode: str, pricing: PricingTable, prompt_id: str = "") -> CostReport:
    """Price a TokenUsage (anything with ``input_tokens``/``output_tokens``)."""
    entry = pricing.lookup(model_id, mode)
    i, o = int(usage.input_tokens), int(usage.output_tokens)
    if i < 0 or o < 0:
        raise ValueError("token counts must be non-negative")
    return CostReport(model_id, entry.mode, str(prompt_id), i, o,
                      usd(i, entry.input_micro), usd(o, entry.output_micro),
                      entry.input_micro, entry.output_micro)


@dataclass
class InflationFlag:
    cheaper_rate: str
    costlier_total: str
    input_token_ratio: float
    note: str = ""


@dataclass
class CostComparison:
    ranking: list[CostReport]
    flags: list[InflationFlag]

    def to_dict(self, rounding: str = "down") -> dict:
        return {
            "ranking": [r.to_dict(rounding) for r in self.ranking],
            "flags": [f.__dict__ for f in self.flags],
        }


def _name(r: CostReport) -> str:
    parts = [r.model_id, r.mode]
    if r.prompt_id:
        parts.append(f"prompt {r.prompt_id}")
    return " / ".join(parts)


def compare_models(reports: Sequence[CostReport]) -> CostComparison:
    """Rank runs by exact total cost and flag token-inflation inversions.

    A flag is raised for each pair where one run has the lower nominal input
    rate yet the higher total, with the ratio of their input token counts.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("need at least two cost reports to compare")
    ranking = sorted(reports, key=lambda r: r.total)  # stable: ties keep input order
    flags = []
    for a in reports:
        for b in reports:
            if a is b:
                continue
            if a.input_rate_micro < b.input_rate_micro and a.total > b.total:
                ratio = a.input_tokens / b.input_tokens if b.input_tokens else float("inf")
                flags.append(InflationFlag(
                    _name(a), _name(b), ratio,
                    f"{_name(a)} has the lower input rate but used {ratio:.1f}x the input tokens",
                ))
    return CostComparison(ranking, flags)


def render_cost_table(reports: Sequence[CostReport], flags: Sequence[InflationFlag] = (),
                      rounding: str = "down") -> str:
    """Markdown cost table: one row per report, followed by any inflation notes."""
    lines = ["| Model | Prompt | Mode | Input tokens | Output tokens | Input cost ($USD) | "
             "Output cost ($USD) | Total ($USD) |",
             "|---|---|---|---:|---:|---:|---:|---:|"]
    for r in reports:
        lines.append(f"| {r.model_id} | {r.prompt_id or '-'} | {r.mode.replace('_', '-')} | {r.input_tokens} | "
                     f"{r.output_tokens} | {display(r.input_cost, rounding)} | "
                     f"{display(r.output_cost, rounding)} | {display(r.total, rounding)} |")
    if flags:
        lines.append("")
        lines.extend(f"- token inflation: {f.note}" for f in flags)
    return "\n".join(lines) + "\n"
