"""The curation stages wired to the manifest, the clients and the stage graph.

Stage methods on :class:`Curator` are shared by the per-stage commands and
by the orchestrated full run, so both paths write the same manifest
transitions. Streaming stages take one manifest entry and return a list of
entries for the next stage (empty when the clip leaves the pipeline);
barrier stages take and return lists.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .annotate import FRAMES_PER_REQUEST, RetryPolicy, build_caption_request, caption_corpus, window_clip
from .clients import (
    CaptionClient,
    ContentEmbedder,
    DetectorClient,
    EmbedderClient,
    ScorerClient,
    StubCaptioner,
    StubDetector,
    StubScorer,
)
from .config import Config
from .dedup import (
    ClusterSearchIndex,
    DedupRecord,
    dedup,
    kmeans_fit,
    l2_normalize,
    save_index,
)
from .errors import CuratorError, MissingEmbedding
from .filters import (
    CategoryResampler,
    MlpClassifier,
    MotionThresholds,
    Reason,
    aesthetic_gate,
    classify_motion,
    estimate_flow_block,
    motion_stats,
    percentile_cut,
)
from .frame_io import (
    BUILTIN_CUT_TEMPLATE,
    TranscodeJob,
    TranscoderClient,
    clip_payload,
    read_frame_range,
    read_y4m,
    run_transcode,
    sample_uniform_frames,
)
from .orchestrator import BARRIER, STREAMING, NodeSpec, ResourceVector, StageGraph, StageSpec, load_graph
from .shard_store import Manifest, ManifestEntry, assign_bucket, write_shards
from .splitter import apply_clip_rules, detect_shots_histogram, detect_shots_neural

logger = logging.getLogger(__name__)

TAG_SCORED = "filter:scored"
TAG_PASS = "filter:pass"
TAG_KEPT = "dedup:kept"
CAPTIONS_FILE = "captions.jsonl"
INDEX_FILE = "search.idx"

# stage name -> (kind, per-replica demand, service-time hint in seconds)
DEFAULT_STAGES = {
    "split": (STREAMING, {"cpu": 1, "decode": 1}, 1.0),
    "filter": (STREAMING, {"cpu": 1, "accel": 1}, 0.2),
    "quality_cut": (BARRIER, {"cpu": 1}, 0.01),
    "resample": (BARRIER, {"cpu": 1}, 0.01),
    "annotate": (STREAMING, {"net": 1}, 0.2),
    "dedup": (BARRIER, {"cpu": 1}, 0.01),
    "shard": (BARRIER, {"cpu": 1}, 0.05),
}


def list_inputs(paths: Iterable[str | Path]) -> list[Path]:
    """Expand files and directories into a sorted list of ``.y4m`` files."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(p.glob("*.y4m"))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(p)
    return sorted(set(out))


class Curator:
    """Holds the configuration, manifest, work directory and service clients."""

    def __init__(self, config: Config, manifest: Manifest | None = None):
        self.config = config
        self.manifest = manifest or Manifest(config.manifest)
        self.work = config.work_path
        self._caption_lock = threading.Lock()
        cfg = config
        self.detector = DetectorClient(cfg.endpoint("detector")) if cfg.endpoint("detector") else StubDetector()
        self.captioner = CaptionClient(cfg.endpoint("caption")) if cfg.endpoint("caption") else StubCaptioner()
        self.embedder = (
            EmbedderClient(cfg.endpoint("embed"), cfg.embed_dim) if cfg.endpoint("embed")
            else ContentEmbedder(cfg.embed_dim, seed=cfg.seed)
        )
        self.quality = ScorerClient(cfg.endpoint("quality")) if cfg.endpoint("quality") else StubScorer(0.0, 1.0, "quality")
        self.aesthetic = (
            ScorerClient(cfg.endpoint("aesthetic")) if cfg.endpoint("aesthetic") else StubScorer(2.5, 7.5, "aesthetic")
        )
        self.text_head = (
            MlpClassifier(weights_path=cfg.text_overlay_weights).fit() if cfg.text_overlay_weights else None
        )
        self.taxonomy = (
            MlpClassifier(weights_path=cfg.taxonomy_weights, classes=cfg.taxonomy_classes).fit()
            if cfg.taxonomy_weights else None
        )
        self.thresholds = MotionThresholds(cfg.motion_static, cfg.motion_pan_coherence, cfg.motion_shaky_variance)

    # -- helpers -----------------------------------------------------------------------

    def current(self, entry: ManifestEntry | str) -> ManifestEntry:
        cid = entry if isinstance(entry, str) else entry.clip_id
        cur = self.manifest.get(cid)
        if cur is None:
            raise KeyError(f"{cid} not in manifest")
        return cur

    def frames_rgb(self, entry: ManifestEntry, indices: Sequence[int]) -> list[np.ndarray]:
        """RGB frames at clip-relative ``indices``."""
        if entry.clip_path and Path(entry.clip_path).exists():
            _, frames = read_frame_range(entry.clip_path, 0, entry.end_frame - entry.start_frame)
        else:
            _, frames = read_frame_range(entry.source_path, entry.start_frame, entry.end_frame)
        return [frames[i].to_rgb() for i in indices]

    def payload(self, entry: ManifestEntry) -> bytes:
        if entry.clip_path and Path(entry.clip_path).exists():
            return Path(entry.clip_path).read_bytes()
        if not entry.source_path:
            raise KeyError("no source path recorded")
        return clip_payload(entry.source_path, entry.start_frame, entry.end_frame)

    def embedding_path(self, entry: ManifestEntry) -> Path | None:
        return self.work / entry.embedding_ref if entry.embedding_ref else None

    def load_embedding(self, entry: ManifestEntry) -> np.ndarray | None:
        p = self.embedding_path(entry)
        return np.load(p) if p is not None and p.exists() else None

    # -- split -------------------------------------------------------------------------

    def split_source(self, path: str | Path) -> list[ManifestEntry]:
        """Detect shots in one source video and record its clips.

        Clips already in the manifest are not re-added, so re-running on the
        same input changes nothing.
        """
        cfg = self.config
        path = Path(path)
        source_id = path.stem
        header, frames = read_y4m(path)
        rgb = [f.to_rgb() for f in frames]
        if cfg.detector == "neural":
            bounds = detect_shots_neural(rgb, self.detector)
        else:
            bounds = detect_shots_histogram(rgb, cfg.split_threshold, cfg.min_scene_len, cfg.histogram_bins)
        clips = apply_clip_rules(bounds, len(frames), header.fps, source_id, cfg.min_clip_seconds, cfg.max_clip_seconds)
        new = [c for c in clips if c.clip_id not in self.manifest]
        if not new:
            return []
        clip_paths: dict[str, str] = {}
        if cfg.transcode_template:
            template = BUILTIN_CUT_TEMPLATE if cfg.transcode_template == "builtin" else cfg.transcode_template
            out_dir = self.work / "clips"
            out_dir.mkdir(parents=True, exist_ok=True)
            outputs = [str(out_dir / f"{c.clip_id}.y4m") for c in new]
            job = TranscodeJob(source_id, str(path), [(c.start_frame, c.end_frame) for c in new], outputs,
                               source_frames=len(frames))
            results, _ = run_transcode([job], TranscoderClient(template), raise_on_failure=True)
            clip_paths = {c.clip_id: out for c, (out, _) in zip(new, results)}
        entries = []
        for c in new:
            e = ManifestEntry(
                c.clip_id, source_id, c.start_frame, c.end_frame, c.fps_num, c.fps_den,
                header.width, header.height, "split",
                source_path=str(path.resolve()), clip_path=clip_paths.get(c.clip_id),
            )
            self.manifest.append(e)
            entries.append(e)
        logger.info("%s: %d clip(s) from %d frames", source_id, len(entries), len(frames))
        return entries

    # -- filter ------------------------------------------------------------------------

    def filter_clip(self, entry: ManifestEntry) -> list[ManifestEntry]:
        """Per-clip filters: motion, aesthetics, text overlay, plus scoring and embedding."""
        cfg = self.config
        e = self.current(entry)
        if e.status != "split" or e.has_tag(TAG_SCORED):
            return [e] if e.status == "split" else []
        n = e.end_frame - e.start_frame
        # motion from a few evenly spread consecutive-frame pairs
        starts = sample_uniform_frames(n - 1, min(cfg.motion_pairs, n - 1))
        idx = sorted({i for s in starts for i in (s, s + 1)})
        frames = dict(zip(idx, self.frames_rgb(e, idx)))
        luma = {i: (0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]) for i, f in frames.items()}
        fields = [estimate_flow_block(luma[s], luma[s + 1], cfg.flow_block, cfg.flow_radius) for s in starts]
        verdict = classify_motion(motion_stats(fields), self.thresholds, e.clip_id)
        scores = dict(e.scores)
        scores.update(verdict.scores)
        tags = set(e.tags) | verdict.tags
        if not verdict.passed:
            return self._drop(e, verdict.reason, scores, tags)

        sample = self.frames_rgb(e, sample_uniform_frames(n, FRAMES_PER_REQUEST))
        scores["aesthetic"] = float(self.aesthetic.score(e.clip_id, sample))
        if not aesthetic_gate(scores["aesthetic"], cfg.aesthetic_threshold):
            return self._drop(e, Reason.LOW_AESTHETIC, scores, tags)
        scores["quality"] = float(self.quality.score(e.clip_id, sample))

        vec = l2_normalize(np.asarray(self.embedder.embed(e.clip_id, sample), dtype=np.float64))
        emb_dir = self.work / "embeddings"
        emb_dir.mkdir(parents=True, exist_ok=True)
        np.save(emb_dir / f"{e.clip_id}.npy", vec)
        ref = f"embeddings/{e.clip_id}.npy"

        if self.text_head is not None:
            p_text = float(self.text_head.predict_proba(vec[None, :])[0, 1])
            scores["text_overlay"] = p_text
            if p_text >= self.text_head.threshold:
                return self._drop(e, Reason.TEXT_OVERLAY, scores, tags, embedding_ref=ref)
        if self.taxonomy is not None:
            tags.add(f"category:{self.taxonomy.predict(vec[None, :])[0]}")
        out = replace(e, scores=scores, tags=sorted(tags | {TAG_SCORED}), embedding_ref=ref)
        self.manifest.append(out)
        return [out]

    def _drop(self, e, reason, scores, tags, **extra) -> list:
        reason = reason.value if isinstance(reason, Reason) else str(reason)
        self.manifest.append(replace(e, status="filtered_out", reason=reason, scores=scores, tags=sorted(tags), **extra))
        return []

    def quality_cut(self, entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
        """Corpus barrier: drop the lowest-quality fraction, tag the rest as passed."""
        cur = [self.current(x) for x in entries]
        scored = [(e.clip_id, e.scores["quality"]) for e in cur if e.status == "split" and "quality" in e.scores]
        _, removed = percentile_cut(scored, self.config.percentile_fraction)
        keep = []
        for item, e in zip(entries, cur):
            if e.status != "split":
                continue
            if e.clip_id in removed:
                self.manifest.append(replace(e, status="filtered_out", reason=Reason.LOW_QUALITY.value))
                continue
            self.manifest.append(replace(e, tags=e.with_tags(TAG_PASS)))
            keep.append(item)
        return keep

    def resample(self, entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
        """Corpus barrier: thin categories toward the target mix (needs taxonomy tags)."""
        cur = [self.current(x) for x in entries]
        cats = [next((t.split(":", 1)[1] for t in e.tags if t.startswith("category:")), None) for e in cur]
        if any(c is None for c in cats):
            logger.info("resampling skipped: some clips carry no category")
            return list(entries)
        rs = CategoryResampler(seed=self.config.seed).fit(cats)
        mask = rs.sample(cats, keys=[e.clip_id for e in cur])
        keep = []
        for item, e, ok in zip(entries, cur, mask):
            if ok:
                keep.append(item)
            else:
                self.manifest.append(replace(e, status="filtered_out", reason=Reason.RESAMPLED_OUT.value))
        return keep

    # -- annotate ----------------------------------------------------------------------

    def annotate_clip(self, entry: ManifestEntry) -> list[ManifestEntry]:
        cfg = self.config
        e = self.current(entry)
        if e.status == "annotated":
            return [e]
        if e.status != "split" or not e.has_tag(TAG_PASS):
            return []
        n = e.end_frame - e.start_frame
        reqs = [build_caption_request(e.clip_id, w, i) for i, w in enumerate(window_clip(n, cfg.caption_window))]
        policy = RetryPolicy(cfg.caption_retries, cfg.caption_backoff)
        batch = caption_corpus(reqs, self.captioner, lambda r: self.frames_rgb(e, r.frame_indices), policy, 1)
        if batch.failed:
            raise CuratorError(f"{e.clip_id}: {len(batch.failed)} caption window(s) failed: "
                               f"{next(iter(batch.failed.values()))}")
        self.work.mkdir(parents=True, exist_ok=True)
        with self._caption_lock, open(self.work / CAPTIONS_FILE, "a", encoding="utf-8") as fh:
            for cap in batch.captions:
                fh.write(json.dumps(cap.to_dict(), ensure_ascii=False) + "\n")
        refs = [f"{c.clip_id}/{c.window_index}" for c in batch.captions]
        out = replace(e, status="annotated", caption_refs=refs)
        self.manifest.append(out)
        return [out]

    def load_captions(self) -> dict[str, str]:
        path = self.work / CAPTIONS_FILE
        out = {}
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        out[f"{rec['clip_id']}/{rec['window_index']}"] = rec["text"]
        return out

    # -- dedup -------------------------------------------------------------------------

    def dedup(self, entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
        """Corpus barrier: semantic dedup inside k-means clusters, then refresh the search index."""
        cfg = self.config
        cur = [self.current(x) for x in entries]
        live = [(item, e) for item, e in zip(entries, cur) if e.status == "annotated"]
        if not live:
            return []
        vectors = [self.load_embedding(e) for _, e in live]
        missing = [e.clip_id for (_, e), v in zip(live, vectors) if v is None]
        if missing:
            raise MissingEmbedding(f"{len(missing)} clip(s) have no embedding; run the filter stage first")
        X = np.stack(vectors)
        ids = [e.clip_id for _, e in live]
        model = kmeans_fit(X, min(cfg.dedup_k, len(ids)), seed=cfg.seed, clip_ids=ids)
        records = [DedupRecord(e.clip_id, v, e.width, e.height) for (_, e), v in zip(live, vectors)]
        result = dedup(records, model, cfg.dedup_eps, cfg.dedup_block)
        dup_of = result.duplicate_of()
        keep = []
        for item, e in live:
            if e.clip_id in result.removed:
                tags = e.with_tags(f"duplicate_of:{dup_of[e.clip_id]}")
                self.manifest.append(replace(e, status="deduped_out", reason=Reason.DUPLICATE.value, tags=tags))
            else:
                self.manifest.append(replace(e, tags=e.with_tags(TAG_KEPT)))
                keep.append(item)
        logger.info("dedup: %d kept, %d removed", len(result.kept), len(result.removed))
        self.rebuild_index()
        return keep

    def rebuild_index(self) -> ClusterSearchIndex | None:
        rows = [e for e in self.manifest.scan(status=("annotated", "sharded")) if e.has_tag(TAG_KEPT)]
        pairs = [(e.clip_id, self.load_embedding(e)) for e in rows]
        pairs = [(c, v) for c, v in pairs if v is not None]
        if not pairs:
            return None
        ids = [c for c, _ in pairs]
        X = np.stack([v for _, v in pairs])
        index = ClusterSearchIndex(min(self.config.search_clusters, len(ids)), seed=self.config.seed).fit(X, ids)
        self.work.mkdir(parents=True, exist_ok=True)
        save_index(self.work / INDEX_FILE, index)
        return index

    # -- shard -------------------------------------------------------------------------

    def shard(self, entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
        """Corpus barrier: bucket the kept clips and pack each bucket into tar shards."""
        cur = [self.current(x) for x in entries]
        ready = [(item, e) for item, e in zip(entries, cur) if e.status == "annotated" and e.has_tag(TAG_KEPT)]
        by_bucket: dict[str, list] = {}
        for item, e in ready:
            b = assign_bucket(e.width, e.height, e.duration).key
            by_bucket.setdefault(b, []).append((item, replace(e, bucket=b)))
        captions = self.load_captions()

        def meta(e: ManifestEntry) -> dict:
            d = e.to_dict()
            d["captions"] = [captions.get(r, "") for r in e.caption_refs]
            return d

        done = []
        for key in sorted(by_bucket):
            group = by_bucket[key]
            specs = write_shards([e for _, e in group], self.payload, self.config.shard_max_bytes,
                                 self.config.shard_out, meta)
            where = {cid: s.path for s in specs for cid in s.entries}
            for item, e in group:
                self.manifest.append(replace(e, status="sharded", shard_ref=where[e.clip_id]))
                done.append(item)
        return done

    # -- orchestrated run ----------------------------------------------------------------

    def split_for_run(self, path: str | Path) -> list[ManifestEntry]:
        """Split one source and hand on every clip of it that is still in flight.

        Clips left non-terminal by an earlier interrupted run are resumed.
        """
        self.split_source(path)
        stem = Path(path).stem
        return sorted(
            (e for e in self.manifest.scan(status=("split", "annotated")) if e.source_id == stem),
            key=lambda e: e.clip_id,
        )

    def stage_functions(self) -> dict:
        return {
            "split": self.split_for_run,
            "filter": self.filter_clip,
            "quality_cut": self.quality_cut,
            "resample": self.resample,
            "annotate": self.annotate_clip,
            "dedup": self.dedup,
            "shard": self.shard,
        }


def build_graph(config: Config) -> StageGraph:
    """The stage graph for a full run: the configured pipeline file or the default chain."""
    if config.pipeline:
        graph = load_graph(config.pipeline)
        unknown = {s.name for s in graph.stages} - set(DEFAULT_STAGES)
        if unknown:
            raise CuratorError(f"pipeline names unknown stage(s): {sorted(unknown)}")
        return graph
    names = ["split", "filter", "quality_cut"]
    if config.taxonomy_weights:
        names.append("resample")
    names += ["annotate", "dedup", "shard"]
    return StageGraph.chain([
        StageSpec(n, ResourceVector(DEFAULT_STAGES[n][1]), DEFAULT_STAGES[n][2], DEFAULT_STAGES[n][0], 8)
        for n in names
    ])


def node_specs(config: Config) -> list[NodeSpec]:
    return [NodeSpec(str(n["node_id"]), ResourceVector(n.get("capacity", {}))) for n in config.nodes]
