"""Synthetic y4m videos with known hard cuts, for tests and demos.

Each shot is a noise texture in a single hue family that slides by a fixed
even number of pixels per frame. Sliding with wrap-around permutes the
pixels without changing any colour, so every frame in a shot has the same
histogram, and cuts land exactly where a new hue starts.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frame_io import Frame, StreamHeader, write_y4m
from .splitter import write_boundary_file

logger = logging.getLogger(__name__)

MOTIONS = ((2, 0), (0, 2), (-2, 0), (2, 2), (0, -2))


@dataclass(frozen=True)
class ShotPlan:
    length: int
    hue: float  # in [0, 1)
    motion: tuple[int, int] = (2, 0)  # pixels per frame, even so chroma blocks stay aligned


def hsv_to_rgb_array(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV in [0, 1] to uint8 RGB."""
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        rgb[m, 0], rgb[m, 1], rgb[m, 2] = r[m], g[m], b[m]
    return np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)


def shot_texture(rng: np.random.Generator, height: int, width: int, hue: float) -> np.ndarray:
    h = (hue + rng.uniform(-0.015, 0.015, (height, width))) % 1.0
    s = rng.uniform(0.55, 1.0, (height, width))
    v = rng.uniform(0.35, 1.0, (height, width))
    return hsv_to_rgb_array(h, s, v)


def render_shots(shots: list[ShotPlan], width: int = 64, height: int = 48, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    frames = []
    for shot in shots:
        tex = shot_texture(rng, height, width, shot.hue)
        dx, dy = shot.motion
        for t in range(shot.length):
            frames.append(np.roll(tex, (dy * t, dx * t), axis=(0, 1)))
    return frames


def write_video(path: str | Path, shots: list[ShotPlan], width: int = 64, height: int = 48,
                fps: tuple[int, int] = (24, 1), seed: int = 0) -> list[int]:
    """Render ``shots`` to a y4m file and return the ground-truth cut frames."""
    frames = render_shots(shots, width, height, seed)
    header = StreamHeader(width, height, fps[0], fps[1])
    with open(path, "wb") as fh:
        write_y4m(fh, header, (Frame.from_rgb(f, i) for i, f in enumerate(frames)))
    cuts, pos = [], 0
    for shot in shots[:-1]:
        pos += shot.length
        cuts.append(pos)
    return cuts


def plan_video(rng: np.random.Generator, n_cuts: int, shot_len: tuple[int, int],
               static_prob: float = 0.0) -> list[ShotPlan]:
    base = rng.random()
    shots = []
    for k in range(n_cuts + 1):
        # consecutive hues differ by 0.37 of the colour wheel
        hue = (base + 0.37 * k) % 1.0
        motion = (0, 0) if rng.random() < static_prob else MOTIONS[int(rng.integers(len(MOTIONS)))]
        shots.append(ShotPlan(int(rng.integers(shot_len[0], shot_len[1] + 1)), hue, motion))
    return shots


def make_corpus(
    out_dir: str | Path,
    n_videos: int,
    seed: int = 0,
    cuts: tuple[int, int] = (1, 4),
    shot_len: tuple[int, int] = (20, 60),
    width: int = 64,
    height: int = 48,
    fps: tuple[int, int] = (24, 1),
    static_prob: float = 0.0,
    duplicates: int = 0,
) -> dict[str, list[int]]:
    """Write ``n_videos`` videos plus ``gt.jsonl`` into ``out_dir``.

    ``duplicates`` extra files are byte copies of the first videos, which
    gives the dedup stage something to find.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    truth: dict[str, list[int]] = {}
    for v in range(n_videos):
        vid = f"vid{v:03d}"
        plan = plan_video(rng, int(rng.integers(cuts[0], cuts[1] + 1)), shot_len, static_prob)
        truth[vid] = write_video(out / f"{vid}.y4m", plan, width, height, fps, seed=int(rng.integers(2**31)))
    for d in range(min(duplicates, n_videos)):
        src = f"vid{d:03d}"
        dup = f"dup{d:03d}"
        shutil.copyfile(out / f"{src}.y4m", out / f"{dup}.y4m")
        truth[dup] = list(truth[src])
    write_boundary_file(out / "gt.jsonl", truth)
    logger.info("wrote %d synthetic videos to %s", len(truth), out)
    return truth
