"""``cesbench`` command-line interface.

Configuration precedence is flags > ``--config`` file > built-in defaults;
the resolved configuration is written into each run's ``run_record.json``.
Exit codes: 0 success, 2 configuration error, 3 backend error, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost import compare_models, load_pricing, render_cost_table
from .dataset import dumps_manifest, ingest_manifest
from .errors import CesbenchError, ConfigError
from .pipeline import (
    APPROACHES,
    RunConfig,
    RunContext,
    caption_records,
    embed_images,
    price_usage,
    replay,
    run,
    write_comparison,
)

log = logging.getLogger("cesbench")

_RUN_FIELDS = ("manifest", "format", "backend", "mode", "batch_size", "out", "seed", "test_fraction",
               "fixture_seed", "max_in_flight", "pricing")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table at top level")
    return data


def parse_shots(tokens: Sequence[str]) -> list[int]:
    """Accept ``10``, ``1,5,10`` and ranges like ``1..10``."""
    shots: list[int] = []
    for tok in tokens:
        for part in str(tok).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                if ".." in part:
                    lo, hi = (int(x) for x in part.split("..", 1))
                    shots.extend(range(lo, hi + 1))
                else:
                    shots.append(int(part))
            except ValueError:
                raise ConfigError(f"invalid shots value {part!r}") from None
    return sorted(set(shots))


def resolve_config(args: argparse.Namespace, approach: str, params: dict) -> RunConfig:
    """Merge defaults, the config file and explicit flags (in rising priority)."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    merged: dict = {"approach": approach}
    known = set(_RUN_FIELDS) | {"endpoints", "params", "approach"}
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    merged.update({k: v for k, v in file_cfg.items() if k != "approach"})
    if file_cfg.get("approach") not in (None, approach):
        raise ConfigError(f"config file is for approach {file_cfg['approach']!r}, not {approach!r}")
    for name in _RUN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    merged["params"] = {**merged.get("params", {}), **{k: v for k, v in params.items() if v is not None}}
    for req in ("manifest", "out"):
        if not merged.get(req):
            raise ConfigError(f"--{req} is required (flag or config file)")
    if "backend" not in merged:
        merged["backend"] = "http"
    return RunConfig.from_dict(merged).validate()


def _print_reports(out: Path) -> None:
    md = out / "report.md"
    if md.exists():
        sys.stdout.write(md.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    manifest = ingest_manifest(args.manifest, args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.jsonl").write_text(dumps_manifest(manifest, "jsonl"), encoding="utf-8")
    summary = {
        "name": manifest.name,
        "version": manifest.version,
        "records": len(manifest.records),
        "labeled": len(manifest.labeled()),
        "balanced": manifest.balanced,
        "class_counts": {c.value: n for c, n in manifest.class_counts().items()},
        "content_hash": manifest.content_hash(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for cls, n in summary["class_counts"].items():
        print(f"{cls:20s} {n}")
    print(f"{'total':20s} {summary['records']}  (balanced: {summary['balanced']})")
    return 0


def _stage_context(args, approach: str) -> RunContext:
    cfg = resolve_config(args, approach, {})
    return RunContext(cfg, ingest_manifest(cfg.manifest, cfg.format))


def cmd_embed(args) -> int:
    ctx = _stage_context(args, "visual-probe")
    try:
        vectors = embed_images(ctx, ctx.manifest.records)
    finally:
        ctx.close()
    ids = [r.id for r in ctx.manifest.records if r.id in vectors]
    np.savez(ctx.out / "embeddings.npz", ids=np.array(ids), vectors=np.stack([vectors[i].values for i in ids]))
    print(f"embedded {len(ids)}/{len(ctx.manifest.records)} images into {ctx.cache.root}")
    return 0 if len(ids) == len(ctx.manifest.records) else 3


def cmd_caption(args) -> int:
    ctx = _stage_context(args, "caption-probe")
    try:
        caps = caption_records(ctx, ctx.manifest.records)
    finally:
        ctx.close()
    print(f"captioned {len(caps)}/{len(ctx.manifest.records)} images -> {ctx.out / 'captions.jsonl'}")
    return 0 if len(caps) == len(ctx.manifest.records) else 3


def _run_and_print(cfg: RunConfig) -> int:
    record = run(cfg)
    _print_reports(Path(cfg.out))
    log.info("artifacts: %s", ", ".join(record.artifacts))
    return 0


def cmd_classify(args) -> int:
    return _run_and_print(resolve_config(args, "prompt-zeroshot", {"prompt": args.prompt}))


def cmd_train_probe(args) -> int:
    preset_name = args.preset or "vision-probe"
    features = args.features or ("caption" if preset_name == "text-probe" else "image")
    approach = "caption-probe" if features == "caption" else "visual-probe"
    train = {k: v for k, v in {"epochs": args.epochs, "learning_rate": args.learning_rate,
                               "batch_size": args.probe_batch_size}.items() if v is not None}
    params = {"preset": args.preset, "train": train or None}
    return _run_and_print(resolve_config(args, approach, params))


def cmd_fewshot(args) -> int:
    params = {"shots": parse_shots(args.shots) if args.shots else None, "trials": args.trials,
              "workers": args.workers, "normalize": True if args.normalize else None}
    cfg = resolve_config(args, "fewshot", params)
    code = _run_and_print(cfg)
    sys.stdout.write((Path(cfg.out) / "curve.csv").read_text(encoding="utf-8"))
    return code


def cmd_discover(args) -> int:
    params = {"clusterer": args.clusterer, "k": args.k, "min_cluster_size": args.min_cluster_size,
              "selection": args.selection, "strict": True if args.strict else None}
    return _run_and_print(resolve_config(args, "discover", params))


def cmd_run(args) -> int:
    file_cfg = _load_config_file(args.config)
    approach = args.approach or file_cfg.get("approach")
    if approach not in APPROACHES:
        raise ConfigError(f"unknown approach {approach!r}; expected one of {', '.join(APPROACHES)}")
    return _run_and_print(resolve_config(args, approach, {}))


def _usage_rows(args) -> tuple[list[dict], list[dict]]:
    """(rows from run directories, rows from an explicit usage file)."""
    from_runs: list[dict] = []
    for run_dir in args.runs or []:
        path = Path(run_dir) / "usage.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError:
            raise ConfigError(f"{run_dir}: no usage.json (is it a run directory?)") from None
        from_runs.extend(data.values())
    explicit: list[dict] = []
    if args.usage:
        try:
            data = json.loads(Path(args.usage).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read usage file {args.usage}: {exc}") from None
        explicit.extend(data if isinstance(data, list) else data.values())
    if not from_runs and not explicit:
        raise ConfigError("cost-report needs --runs and/or --usage")
    return from_runs, explicit


def cmd_cost_report(args) -> int:
    pricing = load_pricing(args.pricing)
    from_runs, explicit = _usage_rows(args)
    # run usage skips unpriced (self-hosted) endpoints; explicit rows must all be priced
    reports = price_usage(dict(enumerate(from_runs)), pricing)
    reports += price_usage(dict(enumerate(explicit)), pricing, strict=True)
    if not reports:
        raise ConfigError("no usage row matches a model in the pricing table")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comparison = compare_models(reports) if len(reports) > 1 else None
    doc = {"runs": [r.to_dict(args.rounding) for r in reports],
           "comparison": comparison.to_dict(args.rounding) if comparison else None}
    (out / "cost.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    md = render_cost_table(reports, comparison.flags if comparison else [], args.rounding)
    (out / "cost.md").write_text(md, encoding="utf-8")
    sys.stdout.write(md)
    return 0


def cmd_report(args) -> int:
    path = write_comparison(args.runs, args.out)
    sys.stdout.write(path.read_text(encoding="utf-8"))
    return 0


def cmd_replay(args) -> int:
    record = replay(args.record, args.out)
    _print_reports(Path(record.config["out"]))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_run_options(p: argparse.ArgumentParser, *, out_required: bool = False) -> None:
    g = p.add_argument_group("run options")
    g.add_argument("--manifest", help="CSV or JSON-lines manifest")
    g.add_argument("--format", choices=["csv", "jsonl"], help="manifest format (default: by extension)")
    g.add_argument("--backend", help="'http' (endpoints from --config) or mock:<echo|random|constant[=TEXT]>")
    g.add_argument("--mode", choices=["batch", "no-batch", "no_batch"], help="request batching mode")
    g.add_argument("--batch-size", type=int, dest="batch_size", help="items per request in batch mode")
    g.add_argument("--out", required=out_required, help="output directory (all files are written here)")
    g.add_argument("--seed", type=int, help="global seed (split, probe init, trials)")
    g.add_argument("--test-fraction", type=float, dest="test_fraction")
    g.add_argument("--fixture-seed", type=int, dest="fixture_seed", help="seed of the mock fixture")
    g.add_argument("--max-in-flight", type=int, dest="max_in_flight", help="concurrent requests per endpoint")
    g.add_argument("--pricing", help="pricing.json; adds cost.json to the run outputs")
    g.add_argument("--config", help="TOML or JSON run configuration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cesbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and write a normalised copy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--format", choices=["csv", "jsonl"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("embed", help="compute visual embeddings into the cache")
    _add_run_options(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("caption", help="caption every image")
    _add_run_options(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("classify", help="zero-shot VQA classification with a prompt template")
    _add_run_options(p)
    p.add_argument("--prompt", choices=["simple", "extended", "1", "2"])
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("train-probe", help="train and evaluate a linear probe on frozen embeddings")
    _add_run_options(p)
    p.add_argument("--preset", choices=["vision-probe", "text-probe"], help="default: vision-probe")
    p.add_argument("--features", choices=["image", "caption"], help="default follows the preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--probe-batch-size", type=int, dest="probe_batch_size")
    p.set_defaults(func=cmd_train_probe)

    p = sub.add_parser("fewshot", help="prototype few-shot classification over repeated trials")
    _add_run_options(p)
    p.add_argument("--shots", nargs="+", help="e.g. 10, 1,5,10 or 1..10")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--normalize", action="store_true", help="L2-normalise before averaging prototypes")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("discover", help="caption, cluster and label clusters")
    _add_run_options(p)
    p.add_argument("--clusterer", choices=["kmeans", "hdbscan"])
    p.add_argument("--k", type=int)
    p.add_argument("--min-cluster-size", type=int, dest="min_cluster_size")
    p.add_argument("--selection", choices=["leaf", "eom"])
    p.add_argument("--strict", action="store_true", help="fail when a cluster cannot be mapped")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("run", help="run the approach named by --approach or the config file")
    _add_run_options(p)
    p.add_argument("--approach", choices=APPROACHES)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cost-report", help="price token usage and compare runs")
    p.add_argument("--pricing", required=True)
    p.add_argument("--runs", nargs="*", help="run directories containing usage.json")
    p.add_argument("--usage", help="JSON list of {model_id, mode, prompt_id, input_tokens, output_tokens}")
    p.add_argument("--rounding", choices=["down", "half_up", "half_even"], default="down")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("report", help="cross-approach comparison of finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-run a recorded configuration")
    p.add_argument("--record", required=True, help="path to run_record.json")
    p.add_argument("--out", help="output directory (default: the recorded one)")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CesbenchError as exc:
        print(f"cesbench: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
