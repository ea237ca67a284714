"""Clients for the external model services, plus deterministic local stand-ins.

Every neural component (shot detector, captioner, video embedder, quality and
aesthetic scorers) lives behind a small HTTP contract. The stubs implement the
same methods so tests and desk-scale runs need no network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import socket
import urllib.error
import urllib.request
from typing import Sequence

import numpy as np

from .errors import ClientUnavailable, MalformedResponse
from .frame_io import resize_nearest

logger = logging.getLogger(__name__)

DETECTOR_WINDOW = 100
DETECTOR_SIZE = (48, 27)  # width, height
MODEL_SIZE = (224, 224)
CAPTION_MAX_CHARS = 2048


def stable_seed(*parts: str) -> int:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stable_uniform(*parts: str) -> float:
    """Deterministic value in [0, 1) derived from the given strings."""
    return stable_seed(*parts) / 2**64


def encode_frames(frames_rgb: Sequence[np.ndarray], size=MODEL_SIZE) -> list[str]:
    return [
        base64.b64encode(np.ascontiguousarray(resize_nearest(f, *size), dtype=np.uint8).tobytes()).decode("ascii")
        for f in frames_rgb
    ]


def _post(url: str, body: bytes, content_type: str, timeout: float):
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": content_type})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        raise ClientUnavailable(f"{url}: HTTP {exc.code}") from exc
    except (urllib.error.URLError, socket.timeout, ConnectionError) as exc:
        raise ClientUnavailable(f"{url}: {exc}") from exc
    try:
        return json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedResponse(f"{url}: response is not JSON") from exc


def post_json(url: str, payload: dict, timeout: float = 30.0):
    return _post(url, json.dumps(payload).encode("utf-8"), "application/json", timeout)


# -- shot detector -------------------------------------------------------------

class DetectorClient:
    """POSTs 100 frames, each 48x27 RGB row-major, concatenated as raw bytes.

    The response must be a JSON array of 100 transition probabilities.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def predict(self, frames_rgb: Sequence[np.ndarray]) -> list[float]:
        body = b"".join(
            np.ascontiguousarray(resize_nearest(f, *DETECTOR_SIZE), dtype=np.uint8).tobytes() for f in frames_rgb
        )
        data = _post(self.endpoint, body, "application/octet-stream", self.timeout)
        return _check_probabilities(data, len(frames_rgb))


class StubDetector:
    """Returns fixed probabilities, or whatever ``fn(frames)`` computes."""

    def __init__(self, fn=None, value: float = 0.0):
        self.fn = fn
        self.value = value
        self.calls = 0

    def predict(self, frames_rgb):
        self.calls += 1
        if self.fn is not None:
            return _check_probabilities(self.fn(frames_rgb), len(frames_rgb))
        return [self.value] * len(frames_rgb)


def _check_probabilities(data, n: int) -> list[float]:
    if not isinstance(data, list) or len(data) != n:
        raise MalformedResponse(f"expected a list of {n} probabilities")
    try:
        probs = [float(x) for x in data]
    except (TypeError, ValueError) as exc:
        raise MalformedResponse("non-numeric probability") from exc
    if any(not (0.0 <= p <= 1.0) for p in probs):
        raise MalformedResponse("probability outside [0, 1]")
    return probs


# -- captioner -----------------------------------------------------------------

class CaptionClient:
    def __init__(self, endpoint: str, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def caption(self, clip_id: str, prompt: str, frames_rgb) -> str:
        data = post_json(
            self.endpoint,
            {"clip_id": clip_id, "prompt": prompt, "frames": encode_frames(frames_rgb)},
            self.timeout,
        )
        if not isinstance(data, dict) or not isinstance(data.get("caption"), str):
            raise MalformedResponse('expected {"caption": string}')
        return data["caption"][:CAPTION_MAX_CHARS]


class StubCaptioner:
    TEMPLATE = "A video clip showing scene {tag}."

    def __init__(self, text: str | None = None):
        self.text = text

    def caption(self, clip_id, prompt, frames_rgb) -> str:
        if self.text is not None:
            return self.text
        return self.TEMPLATE.format(tag=hashlib.sha256(clip_id.encode()).hexdigest()[:8])


# -- embedder ------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise MalformedResponse("embedding has zero or non-finite norm")
    return v / n


class EmbedderClient:
    def __init__(self, endpoint: str, dim: int = 512, timeout: float = 60.0):
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout

    def embed(self, clip_id: str, frames_rgb) -> np.ndarray:
        data = post_json(self.endpoint, {"clip_id": clip_id, "frames": encode_frames(frames_rgb)}, self.timeout)
        vec = data.get("vector") if isinstance(data, dict) else None
        if not isinstance(vec, list) or len(vec) != self.dim:
            raise MalformedResponse(f'expected {{"vector": [{self.dim} floats]}}')
        return _unit(np.array(vec, dtype=np.float64))


class StubEmbedder:
    """Pseudo-random unit vector seeded by a hash of the clip id."""

    def __init__(self, dim: int = 512):
        self.dim = dim

    def embed(self, clip_id: str, frames_rgb=None) -> np.ndarray:
        rng = np.random.default_rng(stable_seed("embed", clip_id))
        return _unit(rng.standard_normal(self.dim))

    def embed_text(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(stable_seed("text", text))
        return _unit(rng.standard_normal(self.dim))


class ContentEmbedder:
    """Fixed random projection of a coarse colour thumbnail.

    Visually identical clips map to (near-)identical vectors, which the
    id-seeded stub cannot do; useful for exercising dedup on local data.
    """

    def __init__(self, dim: int = 512, thumb: int = 8, seed: int = 0):
        self.dim = dim
        self.thumb = thumb
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, thumb * thumb * 3))

    def embed(self, clip_id: str, frames_rgb) -> np.ndarray:
        if not len(frames_rgb):
            raise MalformedResponse("no frames to embed")
        # the first frame only: averaging over a moving shot blurs it to its mean colour
        feat = resize_nearest(frames_rgb[0], self.thumb, self.thumb).astype(np.float64).ravel() / 255.0
        feat -= feat.mean()
        return _unit(self._proj @ feat + 1e-9)


# -- scorers -------------------------------------------------------------------

class ScorerClient:
    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def score(self, clip_id: str, frames_rgb) -> float:
        data = post_json(self.endpoint, {"clip_id": clip_id, "frames": encode_frames(frames_rgb)}, self.timeout)
        try:
            value = float(data["score"])
        except (TypeError, KeyError, ValueError) as exc:
            raise MalformedResponse('expected {"score": float}') from exc
        if not np.isfinite(value):
            raise MalformedResponse("score is not finite")
        return value


class StubScorer:
    """Score drawn uniformly from ``[low, high)`` by hashing the clip id."""

    def __init__(self, low: float = 0.0, high: float = 1.0, salt: str = "score"):
        self.low = low
        self.high = high
        self.salt = salt

    def score(self, clip_id: str, frames_rgb=None) -> float:
        return self.low + (self.high - self.low) * stable_uniform(self.salt, clip_id)
