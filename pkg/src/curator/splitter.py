"""Shot boundary detection, clip length rules and detector evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .clients import DETECTOR_WINDOW
from .errors import BinMismatch, MalformedResponse
from .frame_io import Frame, rgb_to_hsv_array

logger = logging.getLogger(__name__)

MIN_CLIP_SECONDS = 2
MAX_CLIP_SECONDS = 60
NEURAL_THRESHOLD = 0.4
MERGE_WITHIN = 2


@dataclass(frozen=True)
class ShotBoundary:
    frame_index: int  # first frame of the new shot
    confidence: float


@dataclass(frozen=True)
class Clip:
    source_id: str
    start_frame: int
    end_frame: int
    fps_num: int
    fps_den: int = 1

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame

    @property
    def duration(self) -> Fraction:
        return Fraction(self.n_frames * self.fps_den, self.fps_num)

    @property
    def clip_id(self) -> str:
        return make_clip_id(self.source_id, self.start_frame, self.end_frame)


def make_clip_id(source_id: str, start: int, end: int) -> str:
    return f"{source_id}_{start:06d}_{end:06d}"


@dataclass(frozen=True)
class SplitEvalResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
        }


# -- histograms ---------------------------------------------------------------

def _as_rgb(frame) -> np.ndarray:
    if isinstance(frame, Frame):
        return frame.to_rgb()
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an HxWx3 RGB array, got shape {arr.shape}")
    return arr


def hsv_histogram(frame, bins: int = 16) -> np.ndarray:
    """Per-channel normalised HSV histograms, shape ``(3, bins)``.

    Hue is binned over [0, 360); saturation and value over [0, 1] with 1.0
    falling in the last bin.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    hsv = rgb_to_hsv_array(_as_rgb(frame)).reshape(-1, 3)
    idx = np.empty(hsv.shape, dtype=np.int64)
    idx[:, 0] = np.floor(hsv[:, 0] * bins / 360.0)
    idx[:, 1:] = np.floor(hsv[:, 1:] * bins)
    np.clip(idx, 0, bins - 1, out=idx)
    n = hsv.shape[0]
    return np.stack([np.bincount(idx[:, c], minlength=bins) / n for c in range(3)])


def hist_distance(hists_a: np.ndarray, hists_b: np.ndarray) -> float:
    """Mean over channels of half the L1 distance; lies in [0, 1]."""
    a = np.asarray(hists_a, dtype=np.float64)
    b = np.asarray(hists_b, dtype=np.float64)
    if a.shape != b.shape:
        raise BinMismatch(f"histogram shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(0.5 * np.abs(a - b).sum(axis=-1)))


def detect_shots_histogram(
    frames: Iterable, threshold: float = 0.15, min_scene_len: int = 15, bins: int = 16
) -> list[ShotBoundary]:
    """Cut wherever consecutive-frame histogram distance exceeds ``threshold``.

    A cut is only accepted ``min_scene_len`` or more frames after the previous
    one (the stream start counts as a boundary).
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    if min_scene_len < 1:
        raise ValueError("min_scene_len must be >= 1")
    boundaries = []
    prev = None
    last = 0
    for i, frame in enumerate(frames):
        hist = hsv_histogram(frame, bins)
        if prev is not None:
            d = hist_distance(prev, hist)
            if d > threshold and i - last >= min_scene_len:
                boundaries.append(ShotBoundary(i, min(max(d, 0.0), 1.0)))
                last = i
        prev = hist
    return boundaries


class HistogramShotDetector(BaseEstimator):
    """Estimator wrapper around :func:`detect_shots_histogram`.

    Stateless, so ``fit`` only validates parameters; ``predict`` maps a frame
    sequence to boundary frame indices.
    """

    def __init__(self, threshold: float = 0.15, min_scene_len: int = 15, bins: int = 16):
        self.threshold = threshold
        self.min_scene_len = min_scene_len
        self.bins = bins

    def fit(self, X=None, y=None):
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if self.min_scene_len < 1 or self.bins < 2:
            raise ValueError("min_scene_len must be >= 1 and bins >= 2")
        return self

    def detect(self, frames) -> list[ShotBoundary]:
        return detect_shots_histogram(frames, self.threshold, self.min_scene_len, self.bins)

    def predict(self, frames) -> list[int]:
        return [b.frame_index for b in self.detect(frames)]


# -- neural detector windows --------------------------------------------------

def neural_boundary_probe(window: Sequence, detector_client, size: int = DETECTOR_WINDOW) -> list[float]:
    """Per-frame transition probabilities for one window, padding the tail by repetition."""
    frames = [_as_rgb(f) for f in window]
    if not frames:
        raise ValueError("empty window")
    if len(frames) > size:
        raise ValueError(f"window longer than {size} frames")
    real = len(frames)
    frames = frames + [frames[-1]] * (size - real)
    probs = detector_client.predict(frames)
    if len(probs) != size:
        raise MalformedResponse(f"detector returned {len(probs)} values, expected {size}")
    return list(probs)


def peaks_to_boundaries(probs: Sequence[float], threshold: float = NEURAL_THRESHOLD, offset: int = 0) -> list[ShotBoundary]:
    """One boundary per contiguous run above ``threshold``, at the run's maximum."""
    out = []
    run_best = None
    for i, p in enumerate(list(probs) + [-1.0]):
        if p >= threshold:
            if run_best is None or p > probs[run_best]:
                run_best = i
        elif run_best is not None:
            out.append(ShotBoundary(offset + run_best, float(probs[run_best])))
            run_best = None
    return out


def merge_boundaries(boundaries: Iterable[ShotBoundary], within: int = MERGE_WITHIN) -> list[ShotBoundary]:
    """Collapse detections closer than ``within`` frames, keeping the more confident."""
    merged: list[ShotBoundary] = []
    for b in sorted(boundaries, key=lambda b: b.frame_index):
        if merged and b.frame_index - merged[-1].frame_index <= within:
            if b.confidence > merged[-1].confidence:
                merged[-1] = b
        else:
            merged.append(b)
    return merged


def detect_shots_neural(
    frames: Sequence, detector_client, threshold: float = NEURAL_THRESHOLD,
    window: int = DETECTOR_WINDOW, stride: int = 50, merge_within: int = MERGE_WITHIN,
) -> list[ShotBoundary]:
    frames = list(frames)
    n = len(frames)
    found = []
    start = 0
    while start < n:
        chunk = frames[start : start + window]
        probs = neural_boundary_probe(chunk, detector_client, window)[: len(chunk)]
        found += peaks_to_boundaries(probs, threshold, offset=start)
        if start + window >= n:
            break
        start += stride
    return [b for b in merge_boundaries(found, merge_within) if 0 < b.frame_index < n]


# -- clip rules ----------------------------------------------------------------

def apply_clip_rules(
    boundaries: Sequence, stream_len: int, fps: Fraction | float | tuple[int, int],
    source_id: str = "", min_seconds: float = MIN_CLIP_SECONDS, max_seconds: float = MAX_CLIP_SECONDS,
) -> list[Clip]:
    """Turn boundaries into clips, dropping short segments and splitting long ones.

    Segments over ``max_seconds`` are cut into the fewest equal parts that each
    fit, so no short remainder is ever produced.
    """
    if isinstance(fps, tuple):
        fps = Fraction(*fps)
    fps = Fraction(fps).limit_denominator(1_000_000)
    min_s = Fraction(min_seconds).limit_denominator(1_000_000)
    max_s = Fraction(max_seconds).limit_denominator(1_000_000)
    cuts = [b.frame_index if isinstance(b, ShotBoundary) else int(b) for b in boundaries]
    edges = [0] + [c for c in cuts if 0 < c < stream_len] + [stream_len]
    clips = []
    for start, end in zip(edges, edges[1:]):
        n = end - start
        if n <= 0:
            continue
        duration = n / fps
        if duration < min_s:
            continue
        parts = 1
        if duration > max_s:
            parts = math.ceil(duration / max_s)
            while Fraction(math.ceil(n / parts)) / fps > max_s:
                parts += 1
        for i in range(parts):
            a = start + (i * n) // parts
            b = start + ((i + 1) * n) // parts
            clips.append(Clip(source_id, a, b, fps.numerator, fps.denominator))
    return clips


# -- evaluation ----------------------------------------------------------------

def range_to_midpoint(start: int, end: int) -> int:
    if start > end:
        raise ValueError("start must not exceed end")
    return (start + end) // 2


def match_boundaries(pred: Sequence[int], gt: Sequence[int], tolerance: int = 2) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching of predictions to ground truth.

    Sweeps ground truth in order and gives each the earliest unused prediction
    inside its window. Windows all have the same width, so this is the
    classic earliest-deadline greedy and is optimal.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    pred = sorted(pred)
    pairs = []
    j = 0
    for g in sorted(gt):
        while j < len(pred) and pred[j] < g - tolerance:
            j += 1
        if j < len(pred) and pred[j] <= g + tolerance:
            pairs.append((g, pred[j]))
            j += 1
    return pairs


def _ratio(num: int, den: int, other_empty: bool) -> float:
    if den == 0:
        return 1.0 if other_empty else 0.0
    return num / den


def _result(tp: int, n_pred: int, n_gt: int) -> SplitEvalResult:
    p = _ratio(tp, n_pred, n_gt == 0)
    r = _ratio(tp, n_gt, n_pred == 0)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return SplitEvalResult(p, r, f1, tp, n_pred - tp, n_gt - tp)


def eval_split(pred: Sequence[int], gt: Sequence[int], tolerance: int = 2) -> SplitEvalResult:
    tp = len(match_boundaries(pred, gt, tolerance))
    return _result(tp, len(pred), len(gt))


def eval_split_corpus(pred: dict, gt: dict, tolerance: int = 2) -> SplitEvalResult:
    """Micro-averaged evaluation over videos keyed by id."""
    tp = n_pred = n_gt = 0
    for vid in sorted(set(pred) | set(gt)):
        p, g = pred.get(vid, []), gt.get(vid, [])
        tp += len(match_boundaries(p, g, tolerance))
        n_pred += len(p)
        n_gt += len(g)
    return _result(tp, n_pred, n_gt)


def load_boundary_file(path: str | Path) -> dict[str, list[int]]:
    """Read line-delimited boundary annotations.

    Each line is ``{"frame": n}`` or ``{"start": a, "end": b}`` (reduced to its
    midpoint), optionally with a ``"video"`` key; lines without one share the
    key ``""``.
    """
    out: dict[str, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if "frame" in rec:
                    frame = int(rec["frame"])
                else:
                    frame = range_to_midpoint(int(rec["start"]), int(rec["end"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad boundary record") from exc
            out.setdefault(str(rec.get("video", "")), []).append(frame)
    return {k: sorted(v) for k, v in out.items()}


def write_boundary_file(path: str | Path, boundaries: dict[str, Iterable[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid in sorted(boundaries):
            for frame in boundaries[vid]:
                rec = {"video": vid, "frame": int(frame)} if vid else {"frame": int(frame)}
                fh.write(json.dumps(rec) + "\n")
