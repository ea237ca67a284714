"""Caption requests, windowing of long clips, captioner calls and caption statistics."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .clients import CAPTION_MAX_CHARS
from .errors import ClientUnavailable, CuratorError, EmptyCorpus
from .frame_io import sample_uniform_frames

logger = logging.getLogger(__name__)

DEFAULT_PROMPT = "Elaborate on the visual and narrative elements of the video in detail"
CAPTION_WINDOW = 256
MIN_FINAL_WINDOW = 32
FRAMES_PER_REQUEST = 8


@dataclass(frozen=True)
class CaptionRequest:
    clip_id: str
    window_index: int
    frame_indices: tuple[int, ...]  # clip-relative
    prompt: str
    frames_ref: str = ""

    def __post_init__(self):
        if len(self.frame_indices) > FRAMES_PER_REQUEST:
            raise ValueError("at most 8 frames per caption request")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame indices must be strictly increasing")


@dataclass(frozen=True)
class Caption:
    clip_id: str
    window_index: int
    text: str
    char_count: int = -1
    word_count: int = -1

    def __post_init__(self):
        if self.char_count < 0:
            object.__setattr__(self, "char_count", len(self.text))
        if self.word_count < 0:
            object.__setattr__(self, "word_count", len(self.text.split()))

    def is_consistent(self) -> bool:
        return self.char_count == len(self.text) and self.word_count == len(self.text.split())

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id, "window_index": self.window_index, "text": self.text,
            "char_count": self.char_count, "word_count": self.word_count,
        }


def window_clip(n_frames: int, window: int = CAPTION_WINDOW, min_final: int = MIN_FINAL_WINDOW) -> list[tuple[int, int]]:
    """Split ``[0, n_frames)`` into consecutive windows of ``window`` frames.

    A final partial window shorter than ``min_final`` is folded into the one
    before it.
    """
    if n_frames < 1:
        raise ValueError("clip must have at least one frame")
    windows = [(s, min(s + window, n_frames)) for s in range(0, n_frames, window)]
    if len(windows) > 1 and windows[-1][1] - windows[-1][0] < min_final:
        tail = windows.pop()
        windows[-1] = (windows[-1][0], tail[1])
    return windows


def build_caption_request(clip_id: str, window: tuple[int, int], window_index: int = 0,
                          prompt: str = DEFAULT_PROMPT, n_frames: int = FRAMES_PER_REQUEST) -> CaptionRequest:
    start, end = window
    if end <= start or start < 0:
        raise ValueError(f"bad window {window}")
    idx = tuple(start + i for i in sample_uniform_frames(end - start, n_frames))
    return CaptionRequest(clip_id, window_index, idx, prompt, f"{clip_id}#{window_index}")


@dataclass
class RetryPolicy:
    retries: int = 2
    backoff: float = 0.5  # seconds before the first retry; doubles each time
    sleep: Callable[[float], None] = time.sleep


@dataclass
class CaptionBatch:
    captions: list[Caption] = field(default_factory=list)
    failed: dict[tuple[str, int], str] = field(default_factory=dict)
    retries: int = 0


def caption_corpus(
    requests: Sequence[CaptionRequest],
    client,
    frames_for: Callable[[CaptionRequest], Sequence[np.ndarray]],
    policy: RetryPolicy | None = None,
    max_inflight: int = 4,
    on_caption: Callable[[Caption], None] | None = None,
) -> CaptionBatch:
    """Caption every request; a failing request never aborts the batch.

    ``frames_for`` loads the RGB frames a request refers to. ``on_caption``
    runs in the calling thread, so it may write to single-writer stores.
    """
    policy = policy or RetryPolicy()

    def work(req):
        retries = 0
        delay = policy.backoff
        while True:
            try:
                text = client.caption(req.clip_id, req.prompt, frames_for(req))
                return req, Caption(req.clip_id, req.window_index, text[:CAPTION_MAX_CHARS]), retries, None
            except (CuratorError, OSError, TimeoutError) as exc:
                if retries >= policy.retries:
                    return req, None, retries, exc
                retries += 1
                policy.sleep(delay)
                delay *= 2

    batch = CaptionBatch()
    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as pool:
        for req, cap, retries, err in pool.map(work, requests):
            batch.retries += retries
            if cap is None:
                kind = "ClientUnavailable" if isinstance(err, ClientUnavailable) else type(err).__name__
                batch.failed[(req.clip_id, req.window_index)] = f"{kind}: {err}"
                logger.warning("caption failed for %s#%d: %s", req.clip_id, req.window_index, err)
                continue
            batch.captions.append(cap)
            if on_caption is not None:
                on_caption(cap)
    return batch


def caption_stats(captions: Sequence[Caption], bin_width: int = 10) -> dict:
    if not captions:
        raise EmptyCorpus("no captions")
    chars = np.array([len(c.text) for c in captions], dtype=np.float64)
    words = np.array([len(c.text.split()) for c in captions], dtype=np.int64)
    hist: dict[int, int] = {}
    for w in words.tolist():
        key = (w // bin_width) * bin_width
        hist[key] = hist.get(key, 0) + 1
    return {
        "count": len(captions),
        "mean_chars": float(chars.mean()),
        "mean_words": float(words.mean()),
        "histogram": dict(sorted(hist.items())),
    }
