"""Clip filters: motion, visual quality, text overlay and video type."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .clients import stable_uniform
from .errors import CategoryMismatch, DimensionMismatch, NonFiniteWeight, ZeroObserved

AESTHETIC_THRESHOLD = 3.5
QUALITY_FRACTION = 0.15
CONFIDENCE_FLOOR = 0.1
SHAKY_COHERENCE = 0.3
ZOOM_FRACTION = 0.7

# Target category mix of the curated corpus, in percent.
CATEGORY_TARGETS = {
    "driving": 11,
    "hand_motion_object_manipulation": 16,
    "human_motion_activity": 10,
    "spatial_awareness_navigation": 16,
    "first_person_pov": 8,
    "nature_dynamics": 20,
    "dynamic_camera_movement": 8,
    "synthetically_rendered": 4,
    "others": 7,
}


class Reason(str, enum.Enum):
    STATIC = "static"
    SHAKY = "shaky"
    LOW_QUALITY = "low_quality"
    LOW_AESTHETIC = "low_aesthetic"
    TEXT_OVERLAY = "text_overlay"
    EXCLUDED_TYPE = "excluded_type"
    RESAMPLED_OUT = "resampled_out"
    DUPLICATE = "duplicate"
    ERROR = "error"


@dataclass
class FilterVerdict:
    clip_id: str
    passed: bool
    scores: dict[str, float] = field(default_factory=dict)
    tags: set[str] = field(default_factory=set)
    reason: Reason | None = None

    def __post_init__(self):
        if not self.passed and self.reason is None:
            raise ValueError("a failing verdict needs a reason")


# -- motion --------------------------------------------------------------------

@dataclass
class FlowField:
    vectors: np.ndarray  # (gh, gw, 2) as (dx, dy)
    confidence: np.ndarray  # (gh, gw)
    block: int
    width: int
    height: int

    def block_centers(self) -> np.ndarray:
        gh, gw = self.confidence.shape
        xs = np.minimum(np.arange(gw) * self.block + self.block / 2.0, self.width)
        ys = np.minimum(np.arange(gh) * self.block + self.block / 2.0, self.height)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


def _block_sum(img: np.ndarray, block: int, gh: int, gw: int) -> np.ndarray:
    h, w = img.shape
    padded = np.zeros((gh * block, gw * block), dtype=img.dtype)
    padded[:h, :w] = img
    return padded.reshape(gh, block, gw, block).sum(axis=(1, 3))


def _candidate_order(radius: int) -> list[tuple[int, int]]:
    cands = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    return sorted(cands, key=lambda v: (abs(v[0]) + abs(v[1]), v[0], v[1]))


def estimate_flow_block(frame_a, frame_b, block: int = 16, search_radius: int = 8) -> FlowField:
    """Exhaustive block matching on luma.

    Each block of ``frame_a`` gets the displacement (dx, dy) into ``frame_b``
    with the least sum of absolute differences. Candidates that push the
    block outside the frame are skipped. Ties go to the smallest
    ``|dx| + |dy|``, then lexicographically smallest (dx, dy).
    """
    a = np.asarray(getattr(frame_a, "luma", frame_a), dtype=np.int64)
    b = np.asarray(getattr(frame_b, "luma", frame_b), dtype=np.int64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionMismatch(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    gh, gw = math.ceil(h / block), math.ceil(w / block)
    r = search_radius
    b_pad = np.zeros((h + 2 * r, w + 2 * r), dtype=np.int64)
    b_pad[r : r + h, r : r + w] = b
    invalid = np.ones_like(b_pad, dtype=np.int64)
    invalid[r : r + h, r : r + w] = 0

    best = np.full((gh, gw), np.iinfo(np.int64).max, dtype=np.int64)
    worst = np.zeros((gh, gw), dtype=np.int64)
    vec = np.zeros((gh, gw, 2), dtype=np.int64)
    for dx, dy in _candidate_order(r):
        shifted = b_pad[r + dy : r + dy + h, r + dx : r + dx + w]
        outside = _block_sum(invalid[r + dy : r + dy + h, r + dx : r + dx + w], block, gh, gw) > 0
        sad = _block_sum(np.abs(a - shifted), block, gh, gw)
        better = (sad < best) & ~outside
        best = np.where(better, sad, best)
        vec[better] = (dx, dy)
        worst = np.where(~outside, np.maximum(worst, sad), worst)
    conf = np.where(worst > 0, 1.0 - best / np.maximum(worst, 1), 0.0)
    return FlowField(vec.astype(np.float64), conf, block, w, h)


@dataclass(frozen=True)
class MotionStats:
    mean_magnitude: float
    mean_vector: tuple[float, float]
    angular_coherence: float
    temporal_variance: float
    # share of moving blocks aligned (within 60 degrees) with the ray from the
    # frame centre, outward or inward, whichever is larger
    radial_fraction: float = 0.0


def motion_stats(fields: Sequence[FlowField], confidence_floor: float = CONFIDENCE_FLOOR) -> MotionStats:
    if not fields:
        raise ValueError("need at least one flow field")
    vecs, per_frame = [], []
    outward = inward = radial_total = 0
    for f in fields:
        mask = f.confidence >= confidence_floor
        v = f.vectors[mask]
        vecs.append(v)
        per_frame.append(float(np.linalg.norm(v, axis=1).mean()) if len(v) else 0.0)
        rays = f.block_centers()[mask] - np.array([f.width / 2.0, f.height / 2.0])
        vn = np.linalg.norm(v, axis=1)
        rn = np.linalg.norm(rays, axis=1)
        ok = (vn > 0) & (rn > 0)
        if ok.any():
            cos = (v[ok] * rays[ok]).sum(axis=1) / (vn[ok] * rn[ok])
            outward += int((cos >= 0.5).sum())
            inward += int((cos <= -0.5).sum())
            radial_total += int(ok.sum())
    allv = np.concatenate(vecs) if vecs else np.zeros((0, 2))
    if len(allv) == 0:
        return MotionStats(0.0, (0.0, 0.0), 0.0, float(np.var(per_frame)), 0.0)
    mags = np.linalg.norm(allv, axis=1)
    moving = mags > 0
    if moving.any():
        units = allv[moving] / mags[moving, None]
        coherence = float(np.linalg.norm(units.sum(axis=0)) / moving.sum())
    else:
        coherence = 0.0
    mean_vec = allv.mean(axis=0)
    radial = max(outward, inward) / radial_total if radial_total else 0.0
    return MotionStats(
        float(mags.mean()),
        (float(mean_vec[0]), float(mean_vec[1])),
        min(coherence, 1.0),
        float(np.var(per_frame)),
        float(radial),
    )


@dataclass(frozen=True)
class MotionThresholds:
    static: float = 0.3  # px/frame
    pan_coherence: float = 0.7
    shaky_variance: float = 4.0


def classify_motion(stats: MotionStats, thresholds: MotionThresholds = MotionThresholds(), clip_id: str = "") -> FilterVerdict:
    scores = {
        "motion_magnitude": stats.mean_magnitude,
        "motion_coherence": stats.angular_coherence,
        "motion_variance": stats.temporal_variance,
    }
    if stats.mean_magnitude < thresholds.static:
        return FilterVerdict(clip_id, False, scores, {"static"}, Reason.STATIC)
    if stats.temporal_variance > thresholds.shaky_variance and stats.angular_coherence < SHAKY_COHERENCE:
        return FilterVerdict(clip_id, False, scores, {"shaky"}, Reason.SHAKY)
    tags = set()
    if stats.angular_coherence >= thresholds.pan_coherence:
        dx, dy = stats.mean_vector
        tags.add("pan" if abs(dx) >= abs(dy) else "tilt")
    if stats.radial_fraction >= ZOOM_FRACTION:
        tags.add("zoom")
    return FilterVerdict(clip_id, True, scores, tags)


class MotionClassifier(BaseEstimator, ClassifierMixin):
    """Rule-based motion filter over :class:`MotionStats` rows."""

    def __init__(self, static_threshold=0.3, pan_coherence=0.7, shaky_variance=4.0):
        self.static_threshold = static_threshold
        self.pan_coherence = pan_coherence
        self.shaky_variance = shaky_variance

    def fit(self, X=None, y=None):
        self.thresholds_ = MotionThresholds(self.static_threshold, self.pan_coherence, self.shaky_variance)
        self.classes_ = np.array([False, True])
        return self

    def verdicts(self, stats: Sequence[MotionStats], clip_ids: Sequence[str] | None = None) -> list[FilterVerdict]:
        check_is_fitted(self, "thresholds_")
        ids = clip_ids or [""] * len(stats)
        return [classify_motion(s, self.thresholds_, cid) for s, cid in zip(stats, ids)]

    def predict(self, stats: Sequence[MotionStats]) -> np.ndarray:
        return np.array([v.passed for v in self.verdicts(stats)])


# -- quality ---------------------------------------------------------------------

def percentile_cut(scored: Mapping[str, float] | Sequence[tuple[str, float]], fraction: float = QUALITY_FRACTION):
    """Drop exactly ``floor(fraction * N)`` lowest scores, ties broken by clip id.

    Returns ``(threshold, removed_ids)``; threshold is the score of the last
    removed clip, or ``-inf`` when nothing is removed.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    items = list(scored.items()) if isinstance(scored, Mapping) else list(scored)
    n_remove = math.floor(Fraction(str(fraction)) * len(items))
    ranked = sorted(items, key=lambda kv: (kv[1], kv[0]))
    removed = ranked[:n_remove]
    threshold = removed[-1][1] if removed else -math.inf
    return threshold, {cid for cid, _ in removed}


class PercentileCut(BaseEstimator):
    """Corpus-level bottom-fraction filter. ``fit`` sees the whole score set."""

    def __init__(self, fraction: float = QUALITY_FRACTION):
        self.fraction = fraction

    def fit(self, scores, clip_ids=None):
        scores = np.asarray(scores, dtype=np.float64)
        ids = list(clip_ids) if clip_ids is not None else [f"{i:09d}" for i in range(len(scores))]
        self.threshold_, self.removed_ = percentile_cut(list(zip(ids, scores.tolist())), self.fraction)
        self.clip_ids_ = ids
        return self

    def transform(self, clip_ids):
        check_is_fitted(self, "removed_")
        return [cid for cid in clip_ids if cid not in self.removed_]

    def fit_transform(self, scores, clip_ids=None):
        self.fit(scores, clip_ids)
        return self.transform(self.clip_ids_)


def aesthetic_gate(score: float, threshold: float = AESTHETIC_THRESHOLD) -> bool:
    if not math.isfinite(score):
        raise ValueError("aesthetic score must be finite")
    return score >= threshold


# -- MLP heads ---------------------------------------------------------------------

@dataclass
class MlpWeights:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (W: out x in, b: out)
    head: str = "auto"  # "sigmoid", "softmax" or "auto" (by output width)

    def __post_init__(self):
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if prev is not None and w.shape[1] != prev:
                raise DimensionMismatch(f"layer {i} expects {w.shape[1]} inputs, previous gives {prev}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NonFiniteWeight(f"layer {i} has non-finite entries")
            prev = w.shape[0]
        if not self.layers:
            raise DimensionMismatch("MLP has no layers")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @classmethod
    def from_json(cls, doc: dict) -> "MlpWeights":
        layers = []
        for spec in doc["layers"]:
            rows, cols = int(spec["rows"]), int(spec["cols"])
            w = np.array(spec["data"], dtype=np.float64)
            if w.size != rows * cols:
                raise DimensionMismatch(f"layer data has {w.size} entries, expected {rows}x{cols}")
            layers.append((w.reshape(rows, cols), np.array(spec["bias"], dtype=np.float64)))
        return cls(layers, doc.get("head", "auto"))

    def to_json(self) -> dict:
        return {
            "head": self.head,
            "layers": [
                {"rows": w.shape[0], "cols": w.shape[1], "data": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in self.layers
            ],
        }


def load_mlp_weights(path: str | Path) -> MlpWeights:
    with open(path, encoding="utf-8") as fh:
        return MlpWeights.from_json(json.load(fh))


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def mlp_infer(embedding, weights: MlpWeights) -> np.ndarray:
    """Forward pass with ReLU hidden layers and a sigmoid or softmax head."""
    x = np.asarray(embedding, dtype=np.float64)
    if x.shape[-1] != weights.in_dim:
        raise DimensionMismatch(f"embedding dim {x.shape[-1]} != MLP input {weights.in_dim}")
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        x = x @ w.T + b
        if i < last:
            x = np.maximum(x, 0.0)
    head = weights.head
    if head == "auto":
        head = "sigmoid" if weights.out_dim == 1 else "softmax"
    if head == "sigmoid":
        return _sigmoid(x)
    if head == "softmax":
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown head type {head!r}")


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Pre-trained MLP head over clip embeddings (text overlay or video type).

    ``classes`` names the softmax outputs; a single-output head is binary.
    """

    def __init__(self, weights: MlpWeights | None = None, weights_path=None, classes=None, threshold: float = 0.5):
        self.weights = weights
        self.weights_path = weights_path
        self.classes = classes
        self.threshold = threshold

    def fit(self, X=None, y=None):
        w = self.weights if self.weights is not None else load_mlp_weights(self.weights_path)
        self.weights_ = w
        if self.classes is not None:
            if len(self.classes) != max(w.out_dim, 2) and w.out_dim != 1:
                raise DimensionMismatch(f"{len(self.classes)} class names for {w.out_dim} outputs")
            self.classes_ = np.array(self.classes)
        else:
            self.classes_ = np.arange(max(w.out_dim, 2))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        p = mlp_infer(X, self.weights_)
        if p.shape[1] == 1:
            return np.hstack([1.0 - p, p])
        return p

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        if p.shape[1] == 2 and self.weights_.out_dim == 1:
            return self.classes_[(p[:, 1] >= self.threshold).astype(int)]
        return self.classes_[np.argmax(p, axis=1)]


# -- distribution reshaping ----------------------------------------------------------

def resample_weights(observed: Mapping[str, float], target: Mapping[str, float], tol: float = 1e-6) -> dict[str, float]:
    """Per-category acceptance probabilities that turn ``observed`` into ``target``.

    acceptance_c = (target_c / observed_c) / max_k(target_k / observed_k)
    """
    if set(observed) != set(target):
        raise CategoryMismatch(f"categories differ: {sorted(set(observed) ^ set(target))}")
    for name, dist in (("observed", observed), ("target", target)):
        if abs(sum(dist.values()) - 1.0) > tol:
            raise ValueError(f"{name} distribution sums to {sum(dist.values())}, not 1")
    zero = [c for c, p in observed.items() if p <= 0]
    if zero:
        raise ZeroObserved(f"no observed mass for {zero}")
    raw = {c: target[c] / observed[c] for c in observed}
    top = max(raw.values())
    return {c: raw[c] / top for c in raw}


def normalize_distribution(counts: Mapping[str, float]) -> dict[str, float]:
    total = float(sum(counts.values()))
    return {k: v / total for k, v in counts.items()}


class CategoryResampler(BaseEstimator):
    """Thins a labelled corpus so its category mix matches ``target``.

    ``fit`` measures the observed mix; ``sample`` draws a seeded keep mask.
    Categories with no observed clips are dropped from the target and the
    remainder renormalised.
    """

    def __init__(self, target=None, seed: int = 0):
        self.target = target
        self.seed = seed

    def fit(self, categories, y=None):
        cats = list(categories)
        if not cats:
            raise ZeroObserved("no labelled clips")
        target = normalize_distribution(self.target or CATEGORY_TARGETS)
        unknown = set(cats) - set(target)
        if unknown:
            raise CategoryMismatch(f"labels outside target: {sorted(unknown)}")
        counts = {c: 0 for c in target}
        for c in cats:
            counts[c] += 1
        present = {c: n for c, n in counts.items() if n > 0}
        self.observed_ = normalize_distribution(present)
        self.target_ = normalize_distribution({c: target[c] for c in present})
        self.acceptance_ = resample_weights(self.observed_, self.target_)
        return self

    def expected_distribution(self) -> dict[str, float]:
        check_is_fitted(self, "acceptance_")
        kept = {c: self.observed_[c] * self.acceptance_[c] for c in self.observed_}
        return normalize_distribution(kept)

    def sample(self, categories, keys=None) -> np.ndarray:
        check_is_fitted(self, "acceptance_")
        cats = list(categories)
        if keys is None:
            u = np.random.default_rng(self.seed).random(len(cats))
        else:
            # per-item draws keyed by id keep decisions stable across reruns
            u = np.array([stable_uniform("resample", str(self.seed), k) for k in keys])
        acc = np.array([self.acceptance_[c] for c in cats])
        return u < acc
