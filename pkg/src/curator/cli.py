"""Command-line entry point: one subcommand per pipeline stage plus full runs, evaluation and search.

Exit codes: 0 clean, 1 some items failed, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .config import Config, load_config
from .dedup import load_index
from .errors import ConfigError, CuratorError, GraphError, Infeasible
from .frame_io import read_y4m
from .orchestrator import run_pipeline, schedule, simulate
from .pipeline import INDEX_FILE, TAG_KEPT, TAG_PASS, TAG_SCORED, Curator, build_graph, list_inputs, node_specs
from .shard_store import TERMINAL
from .splitter import detect_shots_histogram, eval_split_corpus, load_boundary_file, write_boundary_file
from .synth import make_corpus

logger = logging.getLogger("curator")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input from the operator; maps to exit code 2."""


def _emit(doc, out: TextIO | None) -> None:
    (out or sys.stdout).write(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _inputs(config: Config, inputs: Sequence[str] | None) -> list[Path]:
    try:
        return list_inputs(inputs or [config.input_dir])
    except FileNotFoundError as exc:
        raise UsageError(f"input not found: {exc}") from exc


# -- stage commands -------------------------------------------------------------------

def cmd_split(config: Config, inputs: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    paths = _inputs(config, inputs)
    cur = Curator(config)
    new, failed = 0, {}
    for p in paths:
        try:
            new += len(cur.split_source(p))
        except (CuratorError, OSError, ValueError) as exc:
            failed[str(p)] = f"{type(exc).__name__}: {exc}"
            logger.error("split failed for %s: %s", p, exc)
    _emit({"stage": "split", "sources": len(paths), "new_clips": new, "failed": failed}, out)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_filter(config: Config, out: TextIO | None = None) -> int:
    cur = Curator(config)
    todo = [e for e in cur.manifest.scan(status="split") if not e.has_tag(TAG_PASS)]
    failed, dropped = {}, 0
    for e in todo:
        try:
            if not cur.filter_clip(e):
                dropped += 1
        except (CuratorError, OSError, ValueError) as exc:
            failed[e.clip_id] = f"{type(exc).__name__}: {exc}"
            logger.error("filter failed for %s: %s", e.clip_id, exc)
    scored = [e for e in cur.manifest.scan(status="split", tag=TAG_SCORED) if not e.has_tag(TAG_PASS)]
    kept = cur.quality_cut(scored)
    if cur.taxonomy is not None and kept:
        kept = cur.resample(kept)
    _emit({
        "stage": "filter", "considered": len(todo), "dropped_per_clip": dropped,
        "dropped_corpus": len(scored) - len(kept), "passed": len(kept), "failed": failed,
    }, out)
    return EXIT_PARTIAL if failed else EXIT_OK


def _waiting(cur: Curator, need: str) -> list:
    if need == "filter":
        return [e for e in cur.manifest.scan(status="split") if not e.has_tag(TAG_PASS)]
    if need == "annotate":
        return cur.manifest.scan(status="split", tag=TAG_PASS)
    if need == "dedup":
        return [e for e in cur.manifest.scan(status="annotated") if not e.has_tag(TAG_KEPT)]
    return []


def cmd_annotate(config: Config, out: TextIO | None = None) -> int:
    cur = Curator(config)
    todo = cur.manifest.scan(status="split", tag=TAG_PASS)
    if not todo and _waiting(cur, "filter"):
        raise UsageError("no filtered clips to caption; run the filter stage first")
    failed, done = {}, 0
    for e in todo:
        try:
            done += len(cur.annotate_clip(e))
        except (CuratorError, OSError, ValueError) as exc:
            failed[e.clip_id] = f"{type(exc).__name__}: {exc}"
            logger.error("annotate failed for %s: %s", e.clip_id, exc)
    _emit({"stage": "annotate", "annotated": done, "failed": failed}, out)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_dedup(config: Config, out: TextIO | None = None) -> int:
    cur = Curator(config)
    todo = [e for e in cur.manifest.scan(status="annotated") if not e.has_tag(TAG_KEPT)]
    if not todo:
        pending = _waiting(cur, "filter")
        if pending and not any(cur.load_embedding(e) is not None for e in pending):
            raise UsageError("no embeddings found; run the filter stage first")
        if pending or _waiting(cur, "annotate"):
            raise UsageError("no annotated clips to deduplicate; run the annotate stage first")
    missing = [e.clip_id for e in todo if cur.load_embedding(e) is None]
    if missing:
        raise UsageError(f"{len(missing)} clip(s) have no embedding (e.g. {missing[0]}); run the filter stage first")
    kept = cur.dedup(todo) if todo else []
    _emit({"stage": "dedup", "considered": len(todo), "kept": len(kept), "removed": len(todo) - len(kept)}, out)
    return EXIT_OK


def _first_pending(cur: Curator) -> str | None:
    for stage in ("filter", "annotate", "dedup"):
        if _waiting(cur, stage):
            return stage
    return None


def cmd_shard(config: Config, out: TextIO | None = None) -> int:
    cur = Curator(config)
    todo = cur.manifest.scan(status="annotated", tag=TAG_KEPT)
    if not todo and (stage := _first_pending(cur)):
        raise UsageError(f"no deduplicated clips to shard; run the {stage} stage first")
    try:
        done = cur.shard(todo) if todo else []
    except (CuratorError, OSError) as exc:
        logger.error("sharding failed: %s", exc)
        _emit({"stage": "shard", "sharded": 0, "error": str(exc)}, out)
        return EXIT_PARTIAL
    _emit({"stage": "shard", "sharded": len(done)}, out)
    return EXIT_OK


# -- full run --------------------------------------------------------------------------

def cmd_run(config: Config, inputs: Sequence[str] | None = None, simulate_only: bool = False,
            report_path: str | None = None, out: TextIO | None = None) -> int:
    """Schedule the stage graph, run it over every input and emit the run report."""
    paths = _inputs(config, inputs)
    try:
        graph = build_graph(config)
        allocation = schedule(graph.stages, node_specs(config))
    except (Infeasible, GraphError, CuratorError, OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot build pipeline: {exc}") from exc
    extra = {"allocation": allocation.to_dict(), "sources": [p.name for p in paths]}
    if simulate_only:
        report = simulate(graph, allocation, item_count=len(paths), seed=config.seed)
    else:
        cur = Curator(config)
        report = run_pipeline(graph, [str(p) for p in paths], allocation, cur.stage_functions())
        report.outputs = []
        sources = {p.stem for p in paths}
        statuses = Counter(e.status for e in cur.manifest.scan() if e.source_id in sources)
        extra["statuses"] = dict(sorted(statuses.items()))
        extra["non_terminal"] = sum(n for s, n in statuses.items() if s not in TERMINAL)
    errors = report.conservation_errors(graph)
    if errors:
        logger.error("conservation violated: %s", "; ".join(errors))
    extra["conservation_errors"] = errors
    report.extra = extra
    text = report.to_json()
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(text + "\n", encoding="utf-8")
    else:
        (out or sys.stdout).write(text + "\n")
    failed = report.panics or report.dead_letter or errors or extra.get("non_terminal", 0)
    return EXIT_PARTIAL if failed else EXIT_OK


# -- evaluation, search and helpers ----------------------------------------------------------

def cmd_eval_split(pred_path: str, gt_path: str, tolerance: int = 2, out: TextIO | None = None) -> int:
    if tolerance < 0:
        raise UsageError("tolerance must be >= 0")
    try:
        pred = load_boundary_file(pred_path)
        gt = load_boundary_file(gt_path)
    except FileNotFoundError as exc:
        raise UsageError(f"file not found: {exc.filename}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _emit(eval_split_corpus(pred, gt, tolerance).to_dict(), out)
    return EXIT_OK


def cmd_search(config: Config, query_clip: str | None = None, vector_file: str | None = None,
               topk: int = 10, n_probe: int | None = None, out: TextIO | None = None) -> int:
    if (query_clip is None) == (vector_file is None):
        raise UsageError("give exactly one of --query-clip or --vector-file")
    if topk < 1:
        raise UsageError("--topk must be >= 1")
    cur = Curator(config)
    index_path = cur.work / INDEX_FILE
    index = load_index(index_path) if index_path.exists() else cur.rebuild_index()
    if index is None:
        raise UsageError("search index is empty; run the dedup stage first")
    if query_clip is not None:
        entry = cur.manifest.get(query_clip)
        q = cur.load_embedding(entry) if entry is not None else None
        if q is None:
            raise UsageError(f"no embedding for clip {query_clip!r}")
    else:
        try:
            q = np.load(vector_file) if vector_file.endswith(".npy") else np.array(
                json.loads(Path(vector_file).read_text()), dtype=np.float64)
        except FileNotFoundError as exc:
            raise UsageError(f"file not found: {vector_file}") from exc
        except ValueError as exc:
            raise UsageError(f"unreadable vector file {vector_file}: {exc}") from exc
    k = len(index.centroids_)
    probe = k if n_probe is None else min(max(n_probe, 1), k)
    try:
        hits = index.search(q, topk, probe)
    except CuratorError as exc:
        raise UsageError(str(exc)) from exc
    _emit([{"clip_id": c, "score": s} for c, s in hits], out)
    return EXIT_OK


def cmd_detect(config: Config, inputs: Sequence[str], out_path: str, out: TextIO | None = None) -> int:
    """Write histogram-detector cuts for each input as a boundary file."""
    paths = _inputs(config, inputs)
    pred = {}
    for p in paths:
        _, frames = read_y4m(p)
        cuts = detect_shots_histogram((f.to_rgb() for f in frames), config.split_threshold,
                                      config.min_scene_len, config.histogram_bins)
        pred[p.stem] = [b.frame_index for b in cuts]
    write_boundary_file(out_path, pred)
    _emit({"videos": len(pred), "boundaries": sum(map(len, pred.values())), "out": out_path}, out)
    return EXIT_OK


def cmd_synth(out_dir: str, n_videos: int, seed: int = 0, fps: int = 24, min_shot: int = 20,
              max_shot: int = 60, duplicates: int = 0, static_prob: float = 0.0, out: TextIO | None = None) -> int:
    if n_videos < 0 or min_shot < 1 or max_shot < min_shot:
        raise UsageError("bad synthetic corpus parameters")
    truth = make_corpus(out_dir, n_videos, seed, shot_len=(min_shot, max_shot), fps=(fps, 1),
                        duplicates=duplicates, static_prob=static_prob)
    _emit({"videos": len(truth), "cuts": sum(map(len, truth.values())), "gt": str(Path(out_dir) / "gt.jsonl")}, out)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--manifest", help="manifest path (overrides the config)")
    common.add_argument("--profile", choices=["pretrain", "finetune"])
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="curator", description="Video clip curation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="detect shots and record clips")
    p.add_argument("inputs", nargs="*", help="y4m files or directories (default: config input_dir)")
    sub.add_parser("filter", parents=[common], help="motion, aesthetic, quality and content filters")
    sub.add_parser("annotate", parents=[common], help="caption filtered clips")
    sub.add_parser("dedup", parents=[common], help="semantic deduplication")
    sub.add_parser("shard", parents=[common], help="pack kept clips into bucketed tar shards")

    p = sub.add_parser("run", parents=[common], help="run the whole pipeline")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--simulate", action="store_true", help="virtual-clock run; writes only the report")
    p.add_argument("--report", help="write the run report here instead of stdout")

    p = sub.add_parser("eval-split", parents=[common], help="score predicted cuts against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--tolerance", type=int, default=2)

    p = sub.add_parser("search", parents=[common], help="nearest clips by embedding")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--query-clip")
    g.add_argument("--vector-file")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--nprobe", type=int, help="clusters to probe (default: all)")

    p = sub.add_parser("detect", parents=[common], help="write detected cuts as a boundary file")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-scene-len", type=int)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic test videos")
    p.add_argument("out_dir")
    p.add_argument("--videos", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=int, default=24)
    p.add_argument("--min-shot", type=int, default=20)
    p.add_argument("--max-shot", type=int, default=60)
    p.add_argument("--duplicates", type=int, default=0)
    p.add_argument("--static-prob", type=float, default=0.0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {"manifest": args.manifest, "profile": args.profile}
    if args.command == "detect":
        overrides.update(split_threshold=args.threshold, min_scene_len=args.min_scene_len)
    try:
        if args.command == "eval-split":
            return cmd_eval_split(args.pred, args.gt, args.tolerance)
        if args.command == "synth":
            return cmd_synth(args.out_dir, args.videos, args.seed, args.fps, args.min_shot, args.max_shot,
                             args.duplicates, args.static_prob)
        config = load_config(args.config, overrides)
        if args.command == "split":
            return cmd_split(config, args.inputs)
        if args.command == "filter":
            return cmd_filter(config)
        if args.command == "annotate":
            return cmd_annotate(config)
        if args.command == "dedup":
            return cmd_dedup(config)
        if args.command == "shard":
            return cmd_shard(config)
        if args.command == "run":
            return cmd_run(config, args.inputs, args.simulate, args.report)
        if args.command == "search":
            return cmd_search(config, args.query_clip, args.vector_file, args.topk, args.nprobe)
        if args.command == "detect":
            return cmd_detect(config, args.inputs, args.out)
    except (ConfigError, UsageError) as exc:
        print(f"curator: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser.error(f"unhandled command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
