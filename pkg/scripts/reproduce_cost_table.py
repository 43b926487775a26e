"""Rebuild the published VQA cost table from its token counts and derived per-million rates.

Rates come from ``tests/fixtures/price_table_pricing.json`` (each published cost
cell divided by its token count); the script prints the reconstructed table,
the per-cell deviation from the published value and the token-inflation flags.
"""

from __future__ import annotations

import argparse
import json
from decimal import Decimal
from pathlib import Path

from cesbench.cost import compare_models, cost_of, display, load_pricing, render_cost_table
from cesbench.model_clients import TokenUsage

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pricing", default=str(FIXTURES / "price_table_pricing.json"))
    p.add_argument("--rows", default=str(FIXTURES / "price_table_rows.json"))
    args = p.parse_args()

    pricing = load_pricing(args.pricing)
    rows = json.loads(Path(args.rows).read_text(encoding="utf-8"))["rows"]
    reports, worst = [], Decimal(0)
    for row in rows:
        rep = cost_of(TokenUsage(row["input_tokens"], row["output_tokens"]), row["model_id"], row["mode"],
                      pricing, prompt_id=row["prompt"])
        reports.append(rep)
        for exact, printed in ((rep.input_cost, row["input_cost"]), (rep.output_cost, row["output_cost"])):
            worst = max(worst, abs(exact - Decimal(printed)))
            mark = "ok" if display(exact) == printed else "MISMATCH"
            print(f"{rep.model_id:12s} p{rep.prompt_id} {rep.mode:8s} exact={exact:<14} "
                  f"shown={display(exact)} published={printed} {mark}")
    print(f"\nlargest |exact - published| = {worst}\n")
    for prompt in ("1", "2"):
        for mode in ("batch", "no_batch"):
            group = [r for r in reports if r.prompt_id == prompt and r.mode == mode]
            comp = compare_models(group)
            print(f"## prompt {prompt}, {mode}\n")
            print(render_cost_table(comp.ranking, comp.flags))


if __name__ == "__main__":
    main()
