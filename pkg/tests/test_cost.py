from __future__ import annotations

import json
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesbench.cost import (
    PricingEntry,
    PricingTable,
    compare_models,
    cost_of,
    display,
    load_pricing,
    normalize_mode,
    render_cost_table,
    usd,
)
from cesbench.errors import ConfigError, UnknownPricing
from cesbench.model_clients.types import TokenUsage
from conftest import FIXTURES


@pytest.fixture(scope="module")
def pricing():
    return load_pricing(FIXTURES / "price_table_pricing.json")


def _entry(model, mode, i, o):
    return PricingEntry.from_dict({"model_id": model, "mode": mode,
                                   "input_usd_per_million": i, "output_usd_per_million": o})


def test_zero_tokens_costs_nothing(pricing):
    rep = cost_of(TokenUsage(0, 0), "gpt-4o", "batch", pricing)
    assert display(rep.total) == "0.0000" and rep.total == 0


def test_single_cell_against_rational_oracle(pricing):
    rep = cost_of(TokenUsage(640860, 13331), "gpt-4o", "batch", pricing, prompt_id="1")
    oracle = Fraction(640860) * Fraction("1.25") / 10**6
    assert Fraction(rep.input_cost) == oracle
    assert display(rep.input_cost) == "0.8010"
    nb = cost_of(TokenUsage(20195532, 15537), "gpt-4o-mini", "no-batch", pricing)
    assert abs(nb.input_cost - Decimal("3.0293")) <= Decimal("0.0001")


def test_unknown_pricing(pricing):
    with pytest.raises(UnknownPricing) as exc:
        cost_of(TokenUsage(1, 1), "llava", "batch", pricing)
    assert exc.value.model_id == "llava" and exc.value.mode == "batch"
    with pytest.raises(ConfigError):
        normalize_mode("streaming")


def test_table_validation():
    with pytest.raises(ConfigError):
        PricingTable([_entry("m", "batch", "1", "1"), _entry("m", "batch", "2", "2")])
    with pytest.raises(ConfigError):
        PricingTable([_entry("m", "batch", "3", "1"), _entry("m", "no_batch", "2", "2")])
    with pytest.raises(ConfigError):
        _entry("m", "batch", "0.0000001", "1")
    with pytest.raises(ConfigError):
        PricingEntry.from_dict({"model_id": "m", "mode": "batch"})


def test_pricing_json_round_trip(pricing, tmp_path):
    path = tmp_path / "p.json"
    path.write_text(pricing.to_json())
    assert load_pricing(path).entries == pricing.entries
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_pricing(path)


def test_display_rounding_modes():
    amount = Decimal("0.86775")
    assert display(amount) == "0.8677"
    assert display(amount, "half_up") == "0.8678"
    assert display(amount, "half_even") == "0.8678"
    assert display(Decimal("0.86765"), "half_even") == "0.8676"
    with pytest.raises(ConfigError):
        display(amount, "ceiling")


def test_compare_ties_are_stable_and_single_rejected(pricing):
    a = cost_of(TokenUsage(10, 1), "gpt-4o", "batch", pricing, prompt_id="a")
    b = cost_of(TokenUsage(10, 1), "gpt-4o", "batch", pricing, prompt_id="b")
    assert [r.prompt_id for r in compare_models([a, b]).ranking] == ["a", "b"]
    assert [r.prompt_id for r in compare_models([b, a]).ranking] == ["b", "a"]
    assert compare_models([a, b]).flags == []
    with pytest.raises(ValueError):
        compare_models([a])


def test_render_cost_table(pricing):
    mini = cost_of(TokenUsage(20195532, 15537), "gpt-4o-mini", "batch", pricing, "1")
    full = cost_of(TokenUsage(640860, 13331), "gpt-4o", "batch", pricing, "1")
    comp = compare_models([mini, full])
    md = render_cost_table(comp.ranking, comp.flags)
    lines = md.splitlines()
    assert lines[2].startswith("| gpt-4o | 1 | batch | 640860 | 13331 | 0.8010 | 0.0666 |")
    assert lines[3].startswith("| gpt-4o-mini | 1 | batch | 20195532 | 15537 | 1.5146 | 0.0046 |")
    assert "31.5x" in md
    d = full.to_dict()
    assert d["input_cost_usd"] == "0.8010" and Decimal(d["input_cost_exact"]) == full.input_cost


usage = st.builds(TokenUsage, st.integers(0, 10**9), st.integers(0, 10**8))


@settings(max_examples=200, deadline=None)
@given(usage, usage, st.sampled_from(["gpt-4o", "gpt-4o-mini"]), st.sampled_from(["batch", "no_batch"]))
def test_cost_is_additive_and_exact(u1, u2, model, mode):
    table = load_pricing(FIXTURES / "price_table_pricing.json")
    c1, c2 = cost_of(u1, model, mode, table), cost_of(u2, model, mode, table)
    both = cost_of(u1 + u2, model, mode, table)
    assert both.total == c1.total + c2.total
    e = table.lookup(model, mode)
    assert Fraction(c1.input_cost) == Fraction(u1.input_tokens * e.input_micro, 10**12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9), st.integers(1, 50), st.integers(0, 10**8))
def test_cost_is_linear_in_tokens(tokens, k, rate):
    assert usd(k * tokens, rate) == k * usd(tokens, rate)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 10**9))
def test_batch_never_costs_more_than_no_batch(i, o):
    table = load_pricing(FIXTURES / "price_table_pricing.json")
    for model in ("gpt-4o", "gpt-4o-mini"):
        u = TokenUsage(i, o)
        assert cost_of(u, model, "batch", table).total <= cost_of(u, model, "no_batch", table).total


def test_fixture_rows_round_down_to_printed_values(pricing):
    rows = json.loads((FIXTURES / "price_table_rows.json").read_text())["rows"]
    for row in rows:
        rep = cost_of(TokenUsage(row["input_tokens"], row["output_tokens"]), row["model_id"], row["mode"], pricing)
        assert display(rep.input_cost) == row["input_cost"]
        assert display(rep.output_cost) == row["output_cost"]
