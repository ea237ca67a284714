"""Streaming video-clip curation: split, filter, annotate, deduplicate and shard."""

from .config import Config, load_config
from .dedup import ClusterSearchIndex, KMeans, SemanticDeduplicator
from .filters import CategoryResampler, MlpClassifier, MotionClassifier, PercentileCut
from .orchestrator import (
    Allocation,
    NodeSpec,
    ResourceVector,
    RunReport,
    StageGraph,
    StageSpec,
    run_pipeline,
    schedule,
    simulate,
)
from .shard_store import Manifest, ManifestEntry
from .splitter import HistogramShotDetector, eval_split

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "CategoryResampler",
    "ClusterSearchIndex",
    "Config",
    "HistogramShotDetector",
    "KMeans",
    "Manifest",
    "ManifestEntry",
    "MlpClassifier",
    "MotionClassifier",
    "NodeSpec",
    "PercentileCut",
    "ResourceVector",
    "RunReport",
    "SemanticDeduplicator",
    "StageGraph",
    "StageSpec",
    "eval_split",
    "load_config",
    "run_pipeline",
    "schedule",
    "simulate",
]
