"""Run configuration: one JSON document, profile defaults and endpoint overrides from the environment."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

PROFILES = {
    "pretrain": {"percentile_fraction": 0.15, "aesthetic_threshold": 3.5},
    # stricter selection for high-quality fine-tuning sets
    "finetune": {"percentile_fraction": 0.30, "aesthetic_threshold": 4.0},
}

ENDPOINT_ENV = {
    "caption": "CURATOR_CAPTION_ENDPOINT",
    "embed": "CURATOR_EMBED_ENDPOINT",
    "quality": "CURATOR_QUALITY_ENDPOINT",
    "aesthetic": "CURATOR_AESTHETIC_ENDPOINT",
    "detector": "CURATOR_DETECTOR_ENDPOINT",
}

DEFAULT_NODES = [{"node_id": "local", "capacity": {"cpu": 8, "decode": 2, "accel": 2, "net": 4}}]


@dataclass
class Config:
    input_dir: str = "videos"
    manifest: str = "curator_out/manifest.jsonl"
    shard_out: str = "curator_out/shards"
    work_dir: str | None = None  # defaults to <manifest dir>/work
    profile: str = "pretrain"

    detector: str = "histogram"  # or "neural"
    split_threshold: float = 0.15
    min_scene_len: int = 15
    histogram_bins: int = 16
    min_clip_seconds: float = 2.0
    max_clip_seconds: float = 60.0
    transcode_template: str | None = None  # "builtin" selects the bundled cutter

    percentile_fraction: float = 0.15
    aesthetic_threshold: float = 3.5
    motion_static: float = 0.3
    motion_pan_coherence: float = 0.7
    motion_shaky_variance: float = 4.0
    motion_pairs: int = 4
    flow_block: int = 16
    flow_radius: int = 8
    text_overlay_weights: str | None = None
    taxonomy_weights: str | None = None
    taxonomy_classes: list[str] | None = None

    caption_window: int = 256
    caption_retries: int = 2
    caption_backoff: float = 0.5
    caption_inflight: int = 4

    dedup_eps: float = 0.05
    dedup_k: int = 8
    dedup_block: int = 256
    embed_dim: int = 512
    search_clusters: int = 32

    shard_max_bytes: int = 64 * 1024 * 1024

    endpoints: dict[str, str | None] = field(default_factory=dict)
    pipeline: str | None = None
    nodes: list[dict] = field(default_factory=lambda: [dict(n) for n in DEFAULT_NODES])
    seed: int = 0

    @property
    def work_path(self) -> Path:
        return Path(self.work_dir) if self.work_dir else Path(self.manifest).parent / "work"

    def endpoint(self, name: str) -> str | None:
        return self.endpoints.get(name) or None

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "Config":
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        need(self.profile in PROFILES, f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        need(self.detector in ("histogram", "neural"), f"unknown detector {self.detector!r}")
        need(0 < self.split_threshold <= 1, "split_threshold must lie in (0, 1]")
        need(self.min_scene_len >= 1, "min_scene_len must be >= 1")
        need(self.histogram_bins >= 2, "histogram_bins must be >= 2")
        need(0 < self.min_clip_seconds <= self.max_clip_seconds, "need 0 < min_clip_seconds <= max_clip_seconds")
        need(0 <= self.percentile_fraction < 1, "percentile_fraction must lie in [0, 1)")
        need(math.isfinite(self.aesthetic_threshold), "aesthetic_threshold must be finite")
        need(self.motion_static >= 0 and 0 <= self.motion_pan_coherence <= 1, "bad motion thresholds")
        need(self.motion_pairs >= 1 and self.flow_block >= 2 and self.flow_radius >= 0, "bad flow settings")
        need(self.caption_window >= 1 and self.caption_retries >= 0, "bad caption settings")
        need(0 < self.dedup_eps < 1, "dedup_eps must lie in (0, 1)")
        need(self.dedup_k >= 1 and self.dedup_block >= 1, "dedup_k and dedup_block must be >= 1")
        need(self.embed_dim >= 1 and self.search_clusters >= 1, "embed_dim and search_clusters must be >= 1")
        need(self.shard_max_bytes > 0, "shard_max_bytes must be > 0")
        need(bool(self.nodes), "at least one node is required")
        unknown = set(self.endpoints) - set(ENDPOINT_ENV)
        need(not unknown, f"unknown endpoint name(s): {sorted(unknown)}")
        if self.profile == "finetune":
            base = PROFILES["pretrain"]
            need(
                self.percentile_fraction >= base["percentile_fraction"]
                and self.aesthetic_threshold >= base["aesthetic_threshold"],
                "finetune profile must be at least as strict as pretrain",
            )
        return self


_FIELDS = {f.name for f in fields(Config)}


def load_config(
    path: str | Path | None = None,
    overrides: Mapping | None = None,
    env: Mapping[str, str] | None = None,
) -> Config:
    """Build a validated :class:`Config`.

    Precedence, highest first: ``overrides`` (CLI flags), environment
    endpoints, the JSON file, the selected profile's defaults, built-in
    defaults.
    """
    env = os.environ if env is None else env
    doc: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    merged = dict(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    unknown = set(merged) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    profile = merged.get("profile", "pretrain")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    values = {**PROFILES[profile], **merged}
    endpoints = dict(values.get("endpoints") or {})
    for name, var in ENDPOINT_ENV.items():
        if env.get(var):
            endpoints[name] = env[var]
    values["endpoints"] = endpoints
    try:
        cfg = Config(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()
