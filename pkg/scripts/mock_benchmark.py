"""Run all five approaches against a mock backend and write a comparison report."""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from cesbench.dataset import synthetic_manifest, write_manifest
from cesbench.pipeline import APPROACHES, RunConfig, run, write_comparison

PARAMS = {
    "fewshot": {"shots": [1, 5, 10], "trials": 30},
    "discover": {"clusterer": "kmeans"},
}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/mock-benchmark")
    p.add_argument("--per-class", type=int, default=160)
    p.add_argument("--backend", default="mock:echo", help="mock:echo, mock:random or mock:constant=<text>")
    p.add_argument("--seed", type=int, default=42)
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(synthetic_manifest(args.per_class), out / "manifest.jsonl")
    dirs = []
    for approach in APPROACHES:
        t0 = time.perf_counter()
        run_dir = out / approach
        run(RunConfig(str(manifest), approach, str(run_dir), seed=args.seed, backend=args.backend,
                      params=PARAMS.get(approach, {})))
        print(f"{approach:16s} done in {time.perf_counter() - t0:6.1f} s")
        dirs.append(run_dir)
    print(write_comparison(dirs, out).read_text(encoding="utf-8"))


if __name__ == "__main__":
    main()
