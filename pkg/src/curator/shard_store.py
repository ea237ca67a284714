"""Bucketing, tar shard writing and the append-only clip manifest."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import re
import tarfile
import threading
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import InvalidDuration, InvalidTransition, PayloadMissing, WriteFailure

logger = logging.getLogger(__name__)

ASPECTS = {"1:1": Fraction(1), "3:4": Fraction(3, 4), "4:3": Fraction(4, 3), "9:16": Fraction(9, 16), "16:9": Fraction(16, 9)}
BLOCK = tarfile.BLOCKSIZE
RECORD = tarfile.RECORDSIZE


@dataclass(frozen=True)
class Bucket:
    aspect: str
    resolution_tier: str
    length_tier: str

    @property
    def key(self) -> str:
        return f"{self.aspect.replace(':', 'x')}_{self.resolution_tier}_{self.length_tier}"

    @classmethod
    def from_key(cls, key: str) -> "Bucket":
        aspect, res, length = key.split("_")
        return cls(aspect.replace("x", ":"), res, length)


def closest_aspect(width: int, height: int) -> str:
    """Aspect bucket nearest in log-ratio; exact ties go to the wider ratio."""
    ar = Fraction(width, height)
    # max(a/r, r/a) orders candidates exactly like |ln a - ln r|
    best = None
    for name, r in sorted(ASPECTS.items(), key=lambda kv: -kv[1]):
        d = max(ar / r, r / ar)
        if best is None or d < best[0]:
            best = (d, name)
    return best[1]


def resolution_tier(width: int, height: int) -> str:
    short = min(width, height)
    if short < 720:
        return "sd"
    if short < 1080:
        return "hd"
    return "fhd"


def length_tier(duration_s) -> str:
    d = Fraction(duration_s).limit_denominator(1_000_000) if isinstance(duration_s, float) else Fraction(duration_s)
    if d < 2 or d > 60:
        raise InvalidDuration(f"duration {float(d):.3f}s outside [2, 60]")
    if d < 10:
        return "short"
    if d < 30:
        return "medium"
    return "long"


def assign_bucket(width: int, height: int, duration_s) -> Bucket:
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    return Bucket(closest_aspect(width, height), resolution_tier(width, height), length_tier(duration_s))


# -- manifest ------------------------------------------------------------------------------

STATUSES = ("split", "filtered_out", "annotated", "deduped_out", "sharded")
TERMINAL = frozenset({"filtered_out", "deduped_out", "sharded"})
TRANSITIONS = {
    "split": {"split", "filtered_out", "annotated"},
    "annotated": {"annotated", "deduped_out", "sharded"},
    "filtered_out": {"filtered_out"},
    "deduped_out": {"deduped_out"},
    "sharded": {"sharded"},
}


@dataclass
class ManifestEntry:
    clip_id: str
    source_id: str
    start_frame: int
    end_frame: int
    fps_num: int
    fps_den: int = 1
    width: int = 0
    height: int = 0
    status: str = "split"
    reason: str | None = None
    scores: dict[str, float] = field(default_factory=dict)
    tags: list[str] = field(default_factory=list)
    caption_refs: list[str] = field(default_factory=list)
    embedding_ref: str | None = None
    bucket: str | None = None
    shard_ref: str | None = None
    source_path: str | None = None
    clip_path: str | None = None

    def __post_init__(self):
        if self.status not in TRANSITIONS:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status in ("filtered_out", "deduped_out") and not self.reason:
            raise ValueError(f"{self.clip_id}: status {self.status} requires a reason")
        self.tags = sorted(set(self.tags))

    @property
    def duration(self) -> Fraction:
        return Fraction((self.end_frame - self.start_frame) * self.fps_den, self.fps_num)

    def has_tag(self, tag: str) -> bool:
        return tag in self.tags

    def with_tags(self, *tags: str) -> list[str]:
        return sorted(set(self.tags) | set(tags))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def fold_entries(records: Iterable[ManifestEntry]) -> dict[str, ManifestEntry]:
    state: dict[str, ManifestEntry] = {}
    for rec in records:
        state[rec.clip_id] = rec
    return state


class Manifest:
    """Append-only JSONL clip database; the latest line per clip id wins.

    One writer at a time (appends are serialised by a lock); readers re-scan
    the file. Unparseable lines are skipped, logged and counted.
    """

    def __init__(self, path: str | Path, enforce_transitions: bool = True):
        self.path = Path(path)
        self.enforce_transitions = enforce_transitions
        self.corrupt_lines = 0
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._state = fold_entries(self._read())

    def _read(self) -> list[ManifestEntry]:
        out = []
        corrupt = 0
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(ManifestEntry.from_dict(json.loads(line)))
                except (ValueError, TypeError) as exc:
                    corrupt += 1
                    logger.warning("%s:%d: skipping corrupt manifest line (%s)", self.path, lineno, exc)
        self.corrupt_lines = corrupt
        return out

    def append(self, entry: ManifestEntry) -> None:
        with self._lock:
            prev = self._state.get(entry.clip_id)
            if self.enforce_transitions and prev is not None and entry.status not in TRANSITIONS[prev.status]:
                raise InvalidTransition(f"{entry.clip_id}: {prev.status} -> {entry.status}")
            line = json.dumps(entry.to_dict(), sort_keys=True, ensure_ascii=False)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            self._state[entry.clip_id] = ManifestEntry.from_dict(entry.to_dict())

    def get(self, clip_id: str) -> ManifestEntry | None:
        e = self._state.get(clip_id)
        return None if e is None else ManifestEntry.from_dict(e.to_dict())

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._state

    def __len__(self) -> int:
        return len(self._state)

    def scan(self, status: str | Sequence[str] | None = None, bucket: str | None = None, tag: str | None = None) -> list[ManifestEntry]:
        with self._lock:
            self._state = fold_entries(self._read())
            entries = list(self._state.values())
        if isinstance(status, str):
            status = {status}
        return [
            e for e in entries
            if (status is None or e.status in status)
            and (bucket is None or e.bucket == bucket)
            and (tag is None or tag in e.tags)
        ]


def manifest_append(manifest: Manifest, entry: ManifestEntry) -> None:
    manifest.append(entry)


def manifest_scan(manifest: Manifest, **filters) -> list[ManifestEntry]:
    return manifest.scan(**filters)


# -- shards ------------------------------------------------------------------------------------

@dataclass
class ShardSpec:
    bucket: str
    shard_index: int
    entries: list[str]
    byte_size: int
    path: str = ""


def _member_size(n: int) -> int:
    return BLOCK + BLOCK * math.ceil(n / BLOCK)


def _archive_size(member_bytes: int) -> int:
    return RECORD * math.ceil((member_bytes + 2 * BLOCK) / RECORD)


def _tarinfo(name: str, size: int) -> tarfile.TarInfo:
    info = tarfile.TarInfo(name)
    info.size = size
    info.mtime = 0
    info.mode = 0o644
    info.uname = info.gname = ""
    return info


_SHARD_RE = re.compile(r"shard-(\d{6})\.tar$")


def _next_shard_index(bucket_dir: Path) -> int:
    found = [int(m.group(1)) for p in bucket_dir.glob("shard-*.tar") if (m := _SHARD_RE.search(p.name))]
    return max(found) + 1 if found else 0


def write_shards(
    entries: Sequence[ManifestEntry],
    payload_source: Callable[[ManifestEntry], bytes],
    max_bytes: int,
    out_dir: str | Path,
    metadata_for: Callable[[ManifestEntry], dict] | None = None,
) -> list[ShardSpec]:
    """Pack one bucket's clips into ustar shards and update ``out_dir/index.json``.

    Each clip becomes ``{clip_id}.json`` followed by ``{clip_id}.y4m``. A shard
    is closed when the next clip would push the archive past ``max_bytes``;
    a clip that is too big on its own gets a shard to itself.
    """
    if not entries:
        return []
    buckets = {e.bucket for e in entries}
    if len(buckets) != 1 or None in buckets:
        raise ValueError(f"write_shards needs entries from exactly one bucket, got {sorted(map(str, buckets))}")
    bucket = buckets.pop()
    out_dir = Path(out_dir)
    bucket_dir = out_dir / bucket
    bucket_dir.mkdir(parents=True, exist_ok=True)
    metadata_for = metadata_for or (lambda e: e.to_dict())

    samples = []
    for e in entries:
        try:
            payload = payload_source(e)
        except (OSError, KeyError) as exc:
            raise PayloadMissing(f"{e.clip_id}: {exc}") from exc
        if payload is None:
            raise PayloadMissing(e.clip_id)
        meta = json.dumps(metadata_for(e), sort_keys=True, ensure_ascii=False).encode("utf-8")
        samples.append((e.clip_id, meta, payload))

    groups: list[list] = []
    current: list = []
    used = 0
    for sample in samples:
        size = _member_size(len(sample[1])) + _member_size(len(sample[2]))
        if current and _archive_size(used + size) > max_bytes:
            groups.append(current)
            current, used = [], 0
        current.append(sample)
        used += size
    groups.append(current)

    start = _next_shard_index(bucket_dir)
    specs, index_rows = [], []
    for n, group in enumerate(groups):
        idx = start + n
        path = bucket_dir / f"shard-{idx:06d}.tar"
        rows = []
        try:
            with tarfile.open(path, "w", format=tarfile.USTAR_FORMAT) as tf:
                for clip_id, meta, payload in group:
                    offset = tf.offset
                    tf.addfile(_tarinfo(f"{clip_id}.json", len(meta)), io.BytesIO(meta))
                    tf.addfile(_tarinfo(f"{clip_id}.y4m", len(payload)), io.BytesIO(payload))
                    rows.append({"clip_id": clip_id, "offset": offset, "length": tf.offset - offset})
        except (OSError, tarfile.TarError, ValueError) as exc:
            raise WriteFailure(f"{path}: {exc}") from exc
        size = path.stat().st_size
        if size > max_bytes:
            if len(group) > 1:
                raise WriteFailure(f"{path}: {size} bytes exceeds limit {max_bytes}")
            logger.warning("clip %s alone exceeds shard limit (%d > %d bytes)", group[0][0], size, max_bytes)
        rel = str(path.relative_to(out_dir))
        specs.append(ShardSpec(bucket, idx, [g[0] for g in group], size, rel))
        index_rows.append({"path": rel, "bucket": bucket, "entries": rows})
    _update_index(out_dir, index_rows)
    return specs


def _update_index(out_dir: Path, rows: list[dict]) -> None:
    index_path = out_dir / "index.json"
    shards = []
    if index_path.exists():
        with open(index_path, encoding="utf-8") as fh:
            shards = json.load(fh).get("shards", [])
    written = {r["path"] for r in rows}
    shards = [s for s in shards if s["path"] not in written] + rows
    shards.sort(key=lambda s: s["path"])
    tmp = index_path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"shards": shards}, fh, indent=1)
    os.replace(tmp, index_path)


def read_shard(path: str | Path) -> list[tuple[str, dict, bytes]]:
    """Samples of a shard in order; checks the basename-adjacency convention."""
    samples = []
    with tarfile.open(path, "r") as tf:
        members = tf.getmembers()
        if len(members) % 2:
            raise ValueError(f"{path}: odd number of members")
        for meta_m, data_m in zip(members[::2], members[1::2]):
            key, ext1 = meta_m.name.rsplit(".", 1)
            key2, ext2 = data_m.name.rsplit(".", 1)
            if key != key2 or (ext1, ext2) != ("json", "y4m"):
                raise ValueError(f"{path}: members {meta_m.name}, {data_m.name} break sample grouping")
            meta = json.loads(tf.extractfile(meta_m).read())
            samples.append((key, meta, tf.extractfile(data_m).read()))
    return samples
