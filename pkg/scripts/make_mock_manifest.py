"""Write a balanced synthetic manifest whose images exist only for the mock backend."""

from __future__ import annotations

import argparse

from cesbench.dataset import synthetic_manifest, write_manifest


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--per-class", type=int, default=160)
    p.add_argument("--out", default="manifest.jsonl")
    args = p.parse_args()
    path = write_manifest(synthetic_manifest(args.per_class), args.out)
    print(f"wrote {6 * args.per_class} records to {path}")


if __name__ == "__main__":
    main()
