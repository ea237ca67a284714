"""Raw frame streams (YUV4MPEG2), colour conversion, frame sampling and the
external transcoder process contract.

The engine never decodes compressed video itself. Everything it looks at
arrives as y4m, and anything compressed goes through an external command
configured under ``transcoder.template``.
"""

from __future__ import annotations

import io
import logging
import math
import shlex
import string
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagic,
    MissingField,
    ProcessFailure,
    TemplateError,
    TruncatedFrame,
    UnsupportedChroma,
    Y4MError,
)

logger = logging.getLogger(__name__)

MAGIC = b"YUV4MPEG2"
FRAME_TAG = b"FRAME"
C420 = "C420"
C444 = "C444"
# Non-standard extension token carrying the declared frame count.
LENGTH_TOKEN = "XLENGTH="
_MAX_LINE = 4096


@dataclass(frozen=True)
class StreamHeader:
    width: int
    height: int
    fps_num: int
    fps_den: int
    chroma: str = C420
    frame_count: int | None = None
    # header tokens after the magic, kept verbatim so re-serialisation is byte-exact
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise Y4MError(f"non-positive dimensions {self.width}x{self.height}")
        if self.fps_num <= 0 or self.fps_den <= 0:
            raise Y4MError(f"invalid frame rate {self.fps_num}:{self.fps_den}")
        if self.chroma not in (C420, C444):
            raise UnsupportedChroma(self.chroma)
        if self.chroma == C420 and (self.width % 2 or self.height % 2):
            raise Y4MError("C420 streams need even width and height")

    @property
    def fps(self) -> Fraction:
        return Fraction(self.fps_num, self.fps_den)

    @property
    def frame_bytes(self) -> int:
        return frame_payload_size(self.width, self.height, self.chroma)

    @property
    def chroma_shape(self) -> tuple[int, int]:
        if self.chroma == C420:
            return self.height // 2, self.width // 2
        return self.height, self.width

    def header_line(self) -> bytes:
        tokens = self.tokens or self._default_tokens()
        return MAGIC + b" " + " ".join(tokens).encode("ascii") + b"\n"

    def _default_tokens(self) -> tuple[str, ...]:
        toks = [
            f"W{self.width}",
            f"H{self.height}",
            f"F{self.fps_num}:{self.fps_den}",
            "Ip",
            "A1:1",
            "C420jpeg" if self.chroma == C420 else "C444",
        ]
        if self.frame_count is not None:
            toks.append(f"{LENGTH_TOKEN}{self.frame_count}")
        return tuple(toks)

    def duration_seconds(self, n_frames: int | None = None) -> Fraction:
        n = self.frame_count if n_frames is None else n_frames
        return Fraction(n * self.fps_den, self.fps_num)


@dataclass
class Frame:
    """One decoded picture: Y, U, V planes as uint8 arrays."""

    planes: tuple[np.ndarray, np.ndarray, np.ndarray]
    pts_index: int
    params: bytes = b""  # anything after "FRAME" on the marker line

    @property
    def luma(self) -> np.ndarray:
        return self.planes[0]

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p, dtype=np.uint8).tobytes() for p in self.planes)

    def to_rgb(self) -> np.ndarray:
        return yuv_to_rgb(*self.planes)

    @classmethod
    def from_rgb(cls, rgb: np.ndarray, pts_index: int = 0, chroma: str = C420) -> "Frame":
        return cls(rgb_to_yuv(rgb, chroma), pts_index)


def frame_payload_size(width: int, height: int, chroma: str = C420) -> int:
    if chroma == C420:
        return width * height * 3 // 2
    if chroma == C444:
        return width * height * 3
    raise UnsupportedChroma(chroma)


def _parse_chroma(value: str) -> str:
    if value.startswith("420"):
        return C420
    if value == "444":
        return C444
    raise UnsupportedChroma(f"C{value}")


def _parse_tokens(line: bytes) -> StreamHeader:
    if not line.startswith(MAGIC):
        raise BadMagic(f"not a YUV4MPEG2 stream (starts with {line[:9]!r})")
    rest = line[len(MAGIC):].rstrip(b"\n")
    if rest and not rest.startswith(b" "):
        raise BadMagic("magic not followed by a space")
    tokens = tuple(rest.decode("ascii", errors="replace").split())
    width = height = None
    fps = None
    chroma = C420
    frame_count = None
    for tok in tokens:
        key, val = tok[0], tok[1:]
        try:
            if key == "W":
                width = int(val)
            elif key == "H":
                height = int(val)
            elif key == "F":
                num, den = val.split(":")
                fps = (int(num), int(den))
            elif key == "C":
                chroma = _parse_chroma(val)
            elif tok.startswith(LENGTH_TOKEN):
                frame_count = int(tok[len(LENGTH_TOKEN):])
        except ValueError as exc:
            raise Y4MError(f"malformed header token {tok!r}") from exc
    missing = [name for name, v in (("W", width), ("H", height), ("F", fps)) if v is None]
    if missing:
        raise MissingField(f"y4m header lacks {', '.join(missing)}")
    return StreamHeader(width, height, fps[0], fps[1], chroma, frame_count, tokens)


def parse_y4m_header(source: bytes | BinaryIO) -> StreamHeader:
    """Parse the stream header.

    ``source`` is either the raw bytes (only the first line is examined) or a
    binary stream, which is left positioned at the first FRAME marker.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
        end = data.find(b"\n")
        line = data if end < 0 else data[: end + 1]
        return _parse_tokens(line)
    line = source.readline(_MAX_LINE)
    if not line:
        raise BadMagic("empty stream")
    return _parse_tokens(line)


def read_frames(stream: BinaryIO, header: StreamHeader | None = None) -> Iterator[Frame]:
    """Yield frames in order until end of stream.

    Raises TruncatedFrame when a payload (or the declared frame count) is cut short.
    """
    if header is None:
        header = parse_y4m_header(stream)
    size = header.frame_bytes
    y_len = header.width * header.height
    ch, cw = header.chroma_shape
    c_len = ch * cw
    index = 0
    while True:
        if header.frame_count is not None and index >= header.frame_count:
            return
        marker = stream.readline(_MAX_LINE)
        if not marker:
            if header.frame_count is not None and index < header.frame_count:
                raise TruncatedFrame(f"stream ended after {index} of {header.frame_count} declared frames")
            return
        if not marker.startswith(FRAME_TAG) or not marker.endswith(b"\n"):
            raise TruncatedFrame(f"bad FRAME marker at frame {index}: {marker[:16]!r}")
        payload = stream.read(size)
        if len(payload) < size:
            raise TruncatedFrame(f"frame {index}: got {len(payload)} of {size} bytes")
        buf = np.frombuffer(payload, dtype=np.uint8)
        planes = (
            buf[:y_len].reshape(header.height, header.width),
            buf[y_len : y_len + c_len].reshape(ch, cw),
            buf[y_len + c_len :].reshape(ch, cw),
        )
        yield Frame(planes, index, marker[len(FRAME_TAG) : -1])
        index += 1


def write_y4m(out: BinaryIO | None, header: StreamHeader, frames: Iterable[Frame]) -> bytes | int:
    """Serialise a stream. Returns the bytes when ``out`` is None, else bytes written."""
    sink = io.BytesIO() if out is None else out
    written = sink.write(header.header_line())
    expected = header.frame_bytes
    for frame in frames:
        payload = frame.to_bytes()
        if len(payload) != expected:
            raise Y4MError(f"frame {frame.pts_index} payload {len(payload)} != {expected}")
        written += sink.write(FRAME_TAG + frame.params + b"\n")
        written += sink.write(payload)
    if out is None:
        return sink.getvalue()
    return written


def read_y4m(path: str | Path) -> tuple[StreamHeader, list[Frame]]:
    with open(path, "rb") as fh:
        header = parse_y4m_header(fh)
        return header, list(read_frames(fh, header))


def probe_y4m(path: str | Path) -> tuple[StreamHeader, int]:
    """Header plus the number of frames, computed from the file size when possible."""
    with open(path, "rb") as fh:
        header = parse_y4m_header(fh)
        count = 0
        for _ in iter_payload_offsets(fh, header):
            count += 1
    return header, count


def iter_payload_offsets(stream: BinaryIO, header: StreamHeader) -> Iterator[int]:
    """Byte offset of every frame payload, skipping the payloads themselves."""
    size = header.frame_bytes
    here = stream.tell()
    end = stream.seek(0, io.SEEK_END)
    stream.seek(here)
    while True:
        marker = stream.readline(_MAX_LINE)
        if not marker:
            return
        if not marker.startswith(FRAME_TAG):
            raise TruncatedFrame(f"bad FRAME marker {marker[:16]!r}")
        pos = stream.tell()
        if end - pos < size:
            raise TruncatedFrame(f"payload at {pos} shorter than {size}")
        stream.seek(pos + size)
        yield pos


def read_frame_range(path: str | Path, start: int, end: int) -> tuple[StreamHeader, list[Frame]]:
    """Frames ``[start, end)`` of a y4m file; pts_index is kept source-relative."""
    frames = []
    with open(path, "rb") as fh:
        header = parse_y4m_header(fh)
        for frame in read_frames(fh, header):
            if frame.pts_index >= end:
                break
            if frame.pts_index >= start:
                frames.append(frame)
    return header, frames


def _encode_clip(header: StreamHeader, frames: Sequence[Frame]) -> bytes:
    clip_header = StreamHeader(header.width, header.height, header.fps_num, header.fps_den, header.chroma)
    return write_y4m(None, clip_header, [Frame(f.planes, i, f.params) for i, f in enumerate(frames)])


def clip_payload(path: str | Path, start: int, end: int) -> bytes:
    """Frames ``[start, end)`` of ``path`` as a standalone y4m byte string."""
    header, frames = read_frame_range(path, start, end)
    if len(frames) != end - start or start < 0:
        raise ValueError(f"range ({start}, {end}) outside {path}")
    return _encode_clip(header, frames)


def cut_y4m(path: str | Path, ranges: Sequence[tuple[int, int]], outputs: Sequence[str | Path]) -> None:
    """Write each frame range of ``path`` to its own y4m file, one pass over the source."""
    if len(ranges) != len(outputs):
        raise ValueError("ranges and outputs differ in length")
    header, frames = read_y4m(path)
    for (start, end), out in zip(ranges, outputs):
        if not 0 <= start < end <= len(frames):
            raise ValueError(f"range ({start}, {end}) outside 0..{len(frames)}")
        with open(out, "wb") as fh:
            fh.write(_encode_clip(header, frames[start:end]))


# --------------------------------------------------------------------------
# colour

def rgb_to_hsv(r: float, g: float, b: float) -> tuple[float, float, float]:
    """Hexcone HSV of one 8-bit RGB pixel. Achromatic pixels get hue 0."""
    mx = max(r, g, b)
    mn = min(r, g, b)
    v = mx / 255.0
    delta = mx - mn
    if mx == 0 or delta == 0:
        return 0.0, 0.0, v
    s = delta / mx
    if mx == r:
        h = 60.0 * (((g - b) / delta) % 6)
    elif mx == g:
        h = 60.0 * ((b - r) / delta + 2)
    else:
        h = 60.0 * ((r - g) / delta + 4)
    if h >= 360.0:
        h -= 360.0
    return h, s, v


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rgb_to_hsv` over an (..., 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    chromatic = delta > 0
    safe = np.where(chromatic, delta, 1.0)
    h = np.zeros_like(mx)
    rmax = chromatic & (mx == r)
    gmax = chromatic & ~rmax & (mx == g)
    bmax = chromatic & ~rmax & ~gmax
    h = np.where(rmax, 60.0 * np.mod((g - b) / safe, 6.0), h)
    h = np.where(gmax, 60.0 * ((b - r) / safe + 2.0), h)
    h = np.where(bmax, 60.0 * ((r - g) / safe + 4.0), h)
    h = np.where(h >= 360.0, h - 360.0, h)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx / 255.0], axis=-1)


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Full-range BT.601 (JFIF) YCbCr to RGB; subsampled chroma is upsampled by repetition."""
    y = y.astype(np.float64)
    if u.shape != y.shape:
        fy = y.shape[0] // u.shape[0]
        fx = y.shape[1] // u.shape[1]
        u = np.repeat(np.repeat(u, fy, axis=0), fx, axis=1)
        v = np.repeat(np.repeat(v, fy, axis=0), fx, axis=1)
    cb = u.astype(np.float64) - 128.0
    cr = v.astype(np.float64) - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.clip(np.rint(np.stack([r, g, b], axis=-1)), 0, 255).astype(np.uint8)


def rgb_to_yuv(rgb: np.ndarray, chroma: str = C420) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    if chroma == C420:
        h, w = y.shape
        u = u.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        v = v.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    elif chroma != C444:
        raise UnsupportedChroma(chroma)
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)  # noqa: E731
    return to8(y), to8(u), to8(v)


def resize_nearest(img: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return img[rows][:, cols]


# --------------------------------------------------------------------------
# sampling

def sample_uniform_frames(clip_len: int, count: int) -> list[int]:
    """Endpoint-inclusive evenly spaced indices, rounded half up.

    >>> sample_uniform_frames(9, 3)
    [0, 4, 8]
    """
    if clip_len < 1 or count < 1:
        raise ValueError("clip_len and count must be >= 1")
    n = min(count, clip_len)
    if n == 1:
        return [0]
    step = Fraction(clip_len - 1, n - 1)
    return [math.floor(i * step + Fraction(1, 2)) for i in range(n)]


# --------------------------------------------------------------------------
# transcoder contract

PLACEHOLDERS = ("input", "start", "end", "output")
BUILTIN_CUT_TEMPLATE = f"{shlex.quote(sys.executable)} -m curator.y4mcut {{input}} {{start}} {{end}} {{output}}"
_PER_CLIP = {"start", "end", "output"}


@dataclass
class TranscodeJob:
    source_id: str
    input_path: str
    ranges: list[tuple[int, int]]
    outputs: list[str]
    template_id: str = "default"
    source_frames: int | None = None

    def __post_init__(self):
        if len(self.ranges) != len(self.outputs):
            raise ValueError("each range needs exactly one output path")
        prev_end = None
        for start, end in sorted(self.ranges):
            if start >= end or start < 0:
                raise ValueError(f"bad clip range ({start}, {end})")
            if prev_end is not None and start < prev_end:
                raise ValueError(f"overlapping clip ranges in {self.source_id}")
            if self.source_frames is not None and end > self.source_frames:
                raise ValueError(f"range ({start}, {end}) beyond source length {self.source_frames}")
            prev_end = end


@dataclass
class ThroughputReport:
    sources: int = 0
    clips: int = 0
    invocations: int = 0
    completed_sources: int = 0
    failed_sources: int = 0
    wall_seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def videos_per_second(self) -> float:
        if self.wall_seconds <= 0 or self.completed_sources == 0:
            return 0.0
        return self.completed_sources / self.wall_seconds


def _placeholders(token: str) -> set[str]:
    names = set()
    try:
        for _, name, _, _ in string.Formatter().parse(token):
            if name is not None:
                names.add(name)
    except ValueError as exc:
        raise TemplateError(f"bad template token {token!r}: {exc}") from exc
    return names


class TranscoderClient:
    """Runs an external command per source video.

    Tokens of the template that mention ``{start}``, ``{end}`` or ``{output}``
    (and anything between them, plus option flags right before them) form
    the per-clip group, which is repeated once per clip so a whole source is
    handled in a single invocation::

        y4mcut {input} {start} {end} {output}
        -> y4mcut src.y4m 0 60 a.y4m 60 150 b.y4m
    """

    def __init__(self, template: str, max_workers: int = 1, timeout: float | None = None, runner=None):
        self.template = template
        self.max_workers = max_workers
        self.timeout = timeout
        self._runner = runner or subprocess.run
        self._prefix, self._group, self._suffix = self._split_template(template)

    @staticmethod
    def _split_template(template: str):
        tokens = shlex.split(template)
        seen = set()
        per_clip = []
        for i, tok in enumerate(tokens):
            names = _placeholders(tok)
            unknown = names - set(PLACEHOLDERS)
            if unknown:
                raise TemplateError(f"unknown placeholder(s) {sorted(unknown)} in template")
            seen |= names
            if names & _PER_CLIP:
                per_clip.append(i)
        missing = [p for p in PLACEHOLDERS if p not in seen]
        if missing:
            raise TemplateError(f"template missing placeholder(s): {', '.join('{' + m + '}' for m in missing)}")
        lo, hi = per_clip[0], per_clip[-1]
        # option flags directly in front of the group belong to it ("-ss {start}")
        while lo > 0 and tokens[lo - 1].startswith("-") and not _placeholders(tokens[lo - 1]):
            lo -= 1
        group = tokens[lo : hi + 1]
        if any("input" in _placeholders(t) for t in group):
            raise TemplateError("{input} must not sit inside the per-clip group")
        return tokens[:lo], group, tokens[hi + 1 :]

    def build_command(self, job: TranscodeJob) -> list[str]:
        cmd = [t.format(input=job.input_path) for t in self._prefix]
        for (start, end), out in zip(job.ranges, job.outputs):
            cmd += [t.format(start=start, end=end, output=out) for t in self._group]
        cmd += [t.format(input=job.input_path) for t in self._suffix]
        return cmd

    def run(self, job: TranscodeJob):
        cmd = self.build_command(job)
        logger.debug("transcode %s: %s", job.source_id, cmd)
        return self._runner(cmd, capture_output=True, text=True, timeout=self.timeout)


def _merge_by_source(jobs: Iterable[TranscodeJob]) -> list[TranscodeJob]:
    merged: dict[str, TranscodeJob] = {}
    for job in jobs:
        if job.source_id not in merged:
            merged[job.source_id] = TranscodeJob(
                job.source_id, job.input_path, list(job.ranges), list(job.outputs),
                job.template_id, job.source_frames,
            )
        else:
            cur = merged[job.source_id]
            if cur.input_path != job.input_path:
                raise ValueError(f"source {job.source_id} maps to two input paths")
            # re-validate the union of ranges
            merged[job.source_id] = TranscodeJob(
                cur.source_id, cur.input_path, cur.ranges + list(job.ranges),
                cur.outputs + list(job.outputs), cur.template_id, cur.source_frames,
            )
    return list(merged.values())


def run_transcode(
    jobs: Iterable[TranscodeJob], client: TranscoderClient, raise_on_failure: bool = False
) -> tuple[list[tuple[str, str]], ThroughputReport]:
    """Transcode every clip, one batched invocation per distinct source.

    Returns ``[(output_path, "ok" | "failed"), ...]`` in job order plus a report.
    """
    batches = _merge_by_source(jobs)
    report = ThroughputReport(sources=len(batches), clips=sum(len(b.ranges) for b in batches))
    if not batches:
        return [], report

    def work(job):
        try:
            proc = client.run(job)
        except (OSError, subprocess.SubprocessError) as exc:
            return job, ProcessFailure(job, -1, str(exc))
        if proc.returncode != 0:
            return job, ProcessFailure(job, proc.returncode, proc.stderr or "")
        return job, None

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, client.max_workers)) as pool:
        outcomes = list(pool.map(work, batches))
    report.wall_seconds = time.perf_counter() - t0
    report.invocations = len(batches)

    results = []
    for job, err in outcomes:
        status = "ok" if err is None else "failed"
        if err is None:
            report.completed_sources += 1
        else:
            report.failed_sources += 1
            report.failures.append(str(err))
            logger.warning("%s", err)
            if raise_on_failure:
                raise err
        results.extend((out, status) for out in job.outputs)
    return results, report
