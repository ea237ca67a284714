"""Embeddings, k-means clustering, blocked semantic deduplication and the
cluster-shortlist search index.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import (
    CuratorError,
    DimensionMismatch,
    EmptyInput,
    KTooLarge,
    MissingEmbedding,
    UnnormalizedInput,
)

logger = logging.getLogger(__name__)

DEDUP_EPS = 0.05
DEDUP_BLOCK = 256
NORM_TOL = 1e-6
INDEX_MAGIC = b"CVSI"
INDEX_VERSION = 1


@dataclass
class Embedding:
    clip_id: str
    vector: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.normalized and abs(np.linalg.norm(self.vector) - 1.0) > NORM_TOL:
            raise UnnormalizedInput(f"{self.clip_id}: norm {np.linalg.norm(self.vector)}")


def l2_normalize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise UnnormalizedInput("cannot normalise a zero vector")
    return X / norms


# -- k-means ---------------------------------------------------------------------------

@dataclass
class KMeansModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)
    assignments: dict[str, int] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def predict(self, X) -> np.ndarray:
        labels, _ = _assign(np.atleast_2d(np.asarray(X, dtype=np.float64)), self.centroids)
        return labels


def _sq_dists(X: np.ndarray, C: np.ndarray, budget: int = 1 << 22) -> np.ndarray:
    # direct differences rather than the |x|^2 - 2xc + |c|^2 expansion, which
    # loses the precision the monotone-inertia check relies on
    n, d = X.shape
    k = C.shape[0]
    rows = max(1, budget // max(1, k * d))
    out = np.empty((n, k))
    for s in range(0, n, rows):
        diff = X[s : s + rows, None, :] - C[None, :, :]
        out[s : s + rows] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = _sq_dists(X, C)
    labels = np.argmin(d2, axis=1)  # first minimum on ties
    return labels, d2[np.arange(len(X)), labels]


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen[-1]][None])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[nxt][None])[:, 0])
    return X[chosen].copy()


def _update(X: np.ndarray, labels: np.ndarray, C: np.ndarray) -> np.ndarray:
    k = C.shape[0]
    sums = np.zeros_like(C)
    np.add.at(sums, labels, X)  # sequential in point order -> bit-stable
    counts = np.bincount(labels, minlength=k)
    new = C.copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    return new


def kmeans_fit(X, k: int, max_iters: int = 100, seed: int = 0, clip_ids: Sequence[str] | None = None) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations to an assignment fixpoint.

    Raises RuntimeError if inertia ever increases, which would mean a bug.
    Empty clusters keep their previous centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if n == 0:
        raise EmptyInput("no points to cluster")
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} with {n} points")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    labels, d2 = _assign(X, C)
    inertia = float(d2.sum())
    history = [inertia]
    n_iter = 0
    for _ in range(max_iters):
        n_iter += 1
        C = _update(X, labels, C)
        new_labels, d2 = _assign(X, C)
        new_inertia = float(d2.sum())
        if new_inertia > inertia * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"inertia rose from {inertia} to {new_inertia}")
        history.append(new_inertia)
        inertia = new_inertia
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    assignments = {}
    if clip_ids is not None:
        assignments = {cid: int(lab) for cid, lab in zip(clip_ids, labels)}
    return KMeansModel(C, labels, inertia, seed, n_iter, history, assignments)


class KMeans(BaseEstimator, ClusterMixin):
    """Deterministic k-means (k-means++ init, Lloyd iterations)."""

    def __init__(self, n_clusters: int = 8, max_iter: int = 100, seed: int = 0, n_init: int = 1):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.seed = seed
        self.n_init = n_init

    def fit(self, X, y=None, clip_ids=None):
        X = check_array(X, dtype=np.float64)
        best = None
        for i in range(max(1, self.n_init)):
            model = kmeans_fit(X, self.n_clusters, self.max_iter, self.seed + i, clip_ids)
            if best is None or model.inertia < best.inertia:
                best = model
        self.model_ = best
        self.cluster_centers_ = best.centroids
        self.labels_ = best.labels
        self.inertia_ = best.inertia
        self.inertia_history_ = best.inertia_history
        self.n_iter_ = best.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_array(X, dtype=np.float64))


# -- blocked duplicate search ------------------------------------------------------------

@dataclass
class DuplicateGroup:
    representative: str
    members: set[str]
    max_similarity: float


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def _check_unit(V: np.ndarray) -> None:
    norms = np.linalg.norm(V, axis=1)
    if len(norms) and np.max(np.abs(norms - 1.0)) > NORM_TOL:
        raise UnnormalizedInput("all vectors must be L2-normalised")


def blocked_max_similarity(V: np.ndarray, block: int = DEDUP_BLOCK, threshold: float | None = None):
    """Row-wise max cosine similarity to any other row, one upper-triangle tile at a time.

    Returns ``(max_sim, argmax, pairs)`` where ``pairs`` lists ``(i, j, sim)``
    with ``i < j`` and ``sim >= threshold`` (empty if no threshold given).
    At most one ``block x block`` tile exists at a time.
    """
    n = len(V)
    best = np.full(n, -np.inf)
    arg = np.full(n, -1, dtype=np.int64)
    pairs: list[tuple[int, int, float]] = []
    for bi in range(0, n, block):
        A = V[bi : bi + block]
        for bj in range(bi, n, block):
            S = A @ V[bj : bj + block].T
            if bi == bj:
                S = np.where(np.triu(np.ones(S.shape, dtype=bool), k=1), S, -np.inf)
            # rows of tile bi
            r_arg = np.argmax(S, axis=1)
            r_max = S[np.arange(S.shape[0]), r_arg]
            upd = r_max > best[bi : bi + len(A)]
            best[bi : bi + len(A)][upd] = r_max[upd]
            arg[bi : bi + len(A)][upd] = bj + r_arg[upd]
            # columns of tile bj (the mirrored lower triangle)
            c_arg = np.argmax(S, axis=0)
            c_max = S[c_arg, np.arange(S.shape[1])]
            upd = c_max > best[bj : bj + S.shape[1]]
            best[bj : bj + S.shape[1]][upd] = c_max[upd]
            arg[bj : bj + S.shape[1]][upd] = bi + c_arg[upd]
            if threshold is not None:
                ii, jj = np.nonzero(S >= threshold)
                pairs += [(bi + int(i), bj + int(j), float(S[i, j])) for i, j in zip(ii, jj)]
    return best, arg, pairs


def _pick_representative(members: Sequence[str], resolutions: Mapping[str, tuple[int, int]] | None) -> str:
    def area(cid):
        if not resolutions or cid not in resolutions:
            return 0
        w, h = resolutions[cid]
        return w * h

    return min(members, key=lambda cid: (-area(cid), cid))


def find_duplicates_blocked(
    vectors, clip_ids: Sequence[str], eps: float = DEDUP_EPS, block: int = DEDUP_BLOCK,
    resolutions: Mapping[str, tuple[int, int]] | None = None,
) -> list[DuplicateGroup]:
    """Connected components of pairs with cosine similarity >= 1 - eps.

    Each group keeps its highest-resolution member (ties: smallest clip id).
    """
    if not 0 < eps < 1:
        raise ValueError("eps must be in (0, 1)")
    V = np.asarray(vectors, dtype=np.float64)
    if len(V) != len(clip_ids):
        raise ValueError("one clip id per vector")
    if len(V) < 2:
        return []
    _check_unit(V)
    _, _, pairs = blocked_max_similarity(V, block, threshold=1.0 - eps)
    uf = _UnionFind(len(V))
    for i, j, _ in pairs:
        uf.union(i, j)
    top: dict[int, float] = {}
    for i, j, s in pairs:
        r = uf.find(i)
        top[r] = max(top.get(r, -np.inf), s)
    comps: dict[int, list[str]] = {}
    for i in range(len(V)):
        r = uf.find(i)
        if r in top:
            comps.setdefault(r, []).append(clip_ids[i])
    groups = [
        DuplicateGroup(_pick_representative(m, resolutions), set(m), top[r]) for r, m in comps.items()
    ]
    return sorted(groups, key=lambda g: g.representative)


@dataclass
class DedupRecord:
    clip_id: str
    vector: np.ndarray | None
    width: int = 0
    height: int = 0


@dataclass
class DedupResult:
    kept: set[str]
    removed: set[str]
    groups: list[DuplicateGroup]

    @property
    def removal_fraction(self) -> float:
        total = len(self.kept) + len(self.removed)
        return len(self.removed) / total if total else 0.0

    def duplicate_of(self) -> dict[str, str]:
        return {m: g.representative for g in self.groups for m in g.members if m != g.representative}


def dedup(records: Sequence[DedupRecord], model: KMeansModel, eps: float = DEDUP_EPS, block: int = DEDUP_BLOCK) -> DedupResult:
    """Within-cluster semantic dedup; every non-representative group member is removed."""
    missing = [r.clip_id for r in records if r.vector is None]
    if missing:
        raise MissingEmbedding(f"{len(missing)} record(s) lack embeddings, e.g. {missing[0]}")
    by_cluster: dict[int, list[DedupRecord]] = {}
    unassigned = [r for r in records if r.clip_id not in model.assignments]
    if unassigned:
        labels = model.predict(np.stack([r.vector for r in unassigned]))
        extra = {r.clip_id: int(l) for r, l in zip(unassigned, labels)}
    else:
        extra = {}
    for r in records:
        c = model.assignments.get(r.clip_id, extra.get(r.clip_id))
        by_cluster.setdefault(c, []).append(r)
    res = {r.clip_id: (r.width, r.height) for r in records}
    groups: list[DuplicateGroup] = []
    for c in sorted(by_cluster):
        members = by_cluster[c]
        V = np.stack([m.vector for m in members])
        groups += find_duplicates_blocked(V, [m.clip_id for m in members], eps, block, res)
    removed = {m for g in groups for m in g.members if m != g.representative}
    kept = {r.clip_id for r in records} - removed
    return DedupResult(kept, removed, groups)


class SemanticDeduplicator(BaseEstimator):
    """Cluster embeddings, then drop near-duplicates inside each cluster."""

    def __init__(self, n_clusters: int = 8, eps: float = DEDUP_EPS, block: int = DEDUP_BLOCK,
                 max_iter: int = 100, seed: int = 0):
        self.n_clusters = n_clusters
        self.eps = eps
        self.block = block
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, clip_ids=None, resolutions=None):
        X = check_array(X, dtype=np.float64)
        ids = list(clip_ids) if clip_ids is not None else [f"{i:09d}" for i in range(len(X))]
        k = min(self.n_clusters, len(X))
        self.kmeans_ = kmeans_fit(X, k, self.max_iter, self.seed, ids)
        res = resolutions or {}
        records = [DedupRecord(cid, v, *res.get(cid, (0, 0))) for cid, v in zip(ids, X)]
        result = dedup(records, self.kmeans_, self.eps, self.block)
        self.result_ = result
        self.groups_ = result.groups
        self.kept_ = result.kept
        self.removed_ = result.removed
        self.removal_fraction_ = result.removal_fraction
        self.keep_mask_ = np.array([cid not in result.removed for cid in ids])
        return self

    def fit_predict(self, X, clip_ids=None, resolutions=None):
        return self.fit(X, clip_ids, resolutions).keep_mask_


# -- search ------------------------------------------------------------------------------

class ClusterSearchIndex(BaseEstimator):
    """Inverted-file style index: probe the nearest centroids, rank exactly inside them."""

    def __init__(self, n_clusters: int = 32, n_probe: int = 1, max_iter: int = 100, seed: int = 0):
        self.n_clusters = n_clusters
        self.n_probe = n_probe
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, clip_ids, model: KMeansModel | None = None):
        X = l2_normalize(check_array(X, dtype=np.float64))
        ids = list(clip_ids)
        if len(ids) != len(X):
            raise ValueError("one clip id per vector")
        if model is None:
            model = kmeans_fit(X, min(self.n_clusters, len(X)), self.max_iter, self.seed, ids)
            labels = model.labels
        else:
            labels = np.array([model.assignments[c] if c in model.assignments else -1 for c in ids])
            if (labels < 0).any():
                labels[labels < 0] = model.predict(X[labels < 0])
        return self._set(model.centroids, labels, ids, X)

    def _set(self, centroids, labels, ids, vectors):
        self.centroids_ = np.asarray(centroids, dtype=np.float64)
        self.labels_ = np.asarray(labels, dtype=np.int64)
        self.clip_ids_ = list(ids)
        self.vectors_ = np.asarray(vectors, dtype=np.float64)
        self.lists_ = {c: np.nonzero(self.labels_ == c)[0] for c in range(len(self.centroids_))}
        return self

    @property
    def dim(self) -> int:
        return self.centroids_.shape[1]

    def search(self, query, top_k: int = 10, n_probe: int | None = None) -> list[tuple[str, float]]:
        check_is_fitted(self, "centroids_")
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[0]} != index dim {self.dim}")
        k = len(self.centroids_)
        probe = self.n_probe if n_probe is None else n_probe
        if not 1 <= probe <= k:
            raise ValueError(f"n_probe must be in [1, {k}]")
        qn = q / np.linalg.norm(q)
        cd = np.sum((self.centroids_ - qn) ** 2, axis=1)
        probed = np.argsort(cd, kind="stable")[:probe]
        rows = np.concatenate([self.lists_[int(c)] for c in probed])
        if len(rows) == 0:
            return []
        sims = self.vectors_[rows] @ qn
        ids = [self.clip_ids_[r] for r in rows]
        order = sorted(range(len(rows)), key=lambda i: (-sims[i], ids[i]))[:top_k]
        return [(ids[i], float(sims[i])) for i in order]


def search(query, index: ClusterSearchIndex, top_k: int = 10, n_probe: int = 1) -> list[tuple[str, float]]:
    return index.search(query, top_k, n_probe)


def save_index(path: str | Path, index: ClusterSearchIndex) -> None:
    """Little-endian binary: header, centroids, assignments, id table, vectors."""
    check_is_fitted(index, "centroids_")
    k, d = index.centroids_.shape
    n = len(index.clip_ids_)
    counts = np.bincount(index.labels_, minlength=k).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<B3xIII", INDEX_VERSION, d, k, n))
        fh.write(counts.tobytes())
        fh.write(index.centroids_.astype("<f4").tobytes())
        fh.write(index.labels_.astype("<u4").tobytes())
        for cid in index.clip_ids_:
            raw = cid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(index.vectors_.astype("<f4").tobytes())


def load_index(path: str | Path, n_probe: int = 1) -> ClusterSearchIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise CuratorError(f"{path}: not a search index file")
    version, d, k, n = struct.unpack_from("<B3xIII", data, 4)
    if version != INDEX_VERSION:
        raise CuratorError(f"{path}: unsupported index version {version}")
    off = 4 + struct.calcsize("<B3xIII")
    counts = np.frombuffer(data, "<u4", k, off)
    off += 4 * k
    centroids = np.frombuffer(data, "<f4", k * d, off).reshape(k, d).astype(np.float64)
    off += 4 * k * d
    labels = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    off += 4 * n
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off : off + ln].decode("utf-8"))
        off += ln
    vectors = np.frombuffer(data, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    if not np.array_equal(np.bincount(labels, minlength=k), counts):
        raise CuratorError(f"{path}: cluster counts do not match assignments")
    idx = ClusterSearchIndex(n_clusters=k, n_probe=n_probe)
    return idx._set(centroids, labels, ids, l2_normalize(vectors))


# -- acquisition ---------------------------------------------------------------------------

def embed_corpus(clip_ids: Sequence[str], client, frames_for: Callable[[str], Sequence[np.ndarray]] | None = None):
    """One unit vector per clip; client errors are collected, not raised.

    Returns ``(embeddings, failures)`` keyed by clip id.
    """
    out: dict[str, Embedding] = {}
    failures: dict[str, str] = {}
    for cid in clip_ids:
        try:
            frames = frames_for(cid) if frames_for is not None else None
            vec = np.asarray(client.embed(cid, frames), dtype=np.float64)
            out[cid] = Embedding(cid, l2_normalize(vec))
        except (CuratorError, OSError) as exc:
            failures[cid] = f"{type(exc).__name__}: {exc}"
            logger.warning("embedding failed for %s: %s", cid, exc)
    return out, failures
