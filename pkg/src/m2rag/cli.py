"""Command-line entry point: ``m2rag <stage> --config engine.yaml [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, load_config
from .document import Strategy
from .stages import STAGES, LockBusy, Pipeline, PreconditionError, StageResult
from .stats import render_stats_table

EXIT_OK, EXIT_FAILED_RECORDS, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2rag", description="Multi-modal RAG benchmark pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, type=Path, help="engine config (YAML)")
        p.add_argument("--root", type=Path, help="dataset root (overrides the config)")
        p.add_argument("--dry-run", action="store_true", help="check inputs only; no writes, no backend calls")
        p.add_argument("--format", choices=("table", "records"), default="table", help="report rendering")
        if stage != "meta-eval":
            p.add_argument("--queries", help="comma-separated query ids to process")
        if stage in ("generate", "evaluate", "export-train"):
            p.add_argument("--strategy", choices=[s.value for s in Strategy],
                           help="generation strategy (generate defaults to the config's)")
        if stage == "meta-eval":
            p.add_argument("--repeat", type=int, default=1, help="number of repeated model runs to aggregate")
            p.add_argument("--annotations", type=Path, help="annotation table (overrides the config)")
    return parser


def _render(result: StageResult, fmt: str) -> str:
    if result.stage == "stats":
        if fmt == "table":
            return render_stats_table(result.summary)
        return "".join(json.dumps({"table": k, **r.to_dict()}) + "\n" for k, rows in result.summary.items() for r in rows)
    if result.stage == "evaluate" and any(result.summary.values()) and fmt == "table":
        return _metric_table(result.summary)
    if result.stage == "meta-eval" and fmt == "table" and not result.dry_run:
        return _meta_table(result.summary)
    payload = {
        "stage": result.stage, "skipped": result.skipped, "dry_run": result.dry_run,
        "processed": result.processed, "failures": result.failures, "outputs": result.outputs,
    }
    if result.summary is not None:
        payload["summary"] = result.summary
    if fmt == "records":
        return json.dumps(payload, sort_keys=True) + "\n"
    state = "dry run" if result.dry_run else "up to date, skipped" if result.skipped else f"{len(result.processed)} processed"
    lines = [f"{result.stage}: {state}"]
    lines += [f"  wrote {o}" for o in result.outputs if not result.dry_run and not result.skipped]
    lines += [f"  FAILED {k}: {v}" for k, v in result.failures.items()]
    return "\n".join(lines) + "\n"


_SHORT = {"fluency": "Flu.", "relevance": "Rel.", "context_precision": "CP", "faithfulness": "Faith.",
          "coherence": "Coh.", "helpfulness": "Help.", "reference": "Ref.", "image_recall": "Recall",
          "overall": "Overall"}


def _metric_table(summaries: dict) -> str:
    header = f"{'Strategy':<10}" + "".join(f"{v:>9}" for v in _SHORT.values())
    lines = [header]
    for strat, s in summaries.items():
        if not s:
            continue
        mean = s["mean"]
        lines.append(f"{strat:<10}" + "".join(
            f"{'n/a' if mean[k] is None else format(mean[k], '.1f'):>9}" for k in _SHORT))
    return "\n".join(lines) + "\n"


def _meta_table(summary: dict) -> str:
    lines = [f"{'Pairing':<12}{'Max':>9}{'Min':>9}{'Avg.':>9}"]
    for who in ("model", "model_std", "human"):
        if who in summary:
            s = summary[who]
            lines.append(f"{who:<12}" + "".join(f"{s[k]:>9.3f}" for k in ("max", "min", "avg")))
    return "\n".join(lines) + "\n"


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, root=args.root)
        pipeline = Pipeline(cfg)
        queries = [q.strip() for q in args.queries.split(",") if q.strip()] if getattr(args, "queries", None) else None
        strategy = Strategy(args.strategy) if getattr(args, "strategy", None) else None
        result = pipeline.run(args.stage, queries=queries, strategy=strategy, dry_run=args.dry_run,
                              repeat=getattr(args, "repeat", 1), annotations=getattr(args, "annotations", None))
    except PreconditionError as exc:
        print(f"error: {exc}; run `{exc.stage}` first", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, LockBusy, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(_render(result, args.format))
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
