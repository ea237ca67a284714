import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curator.clients import StubEmbedder
from curator.errors import CuratorError, DimensionMismatch, EmptyInput, KTooLarge, MissingEmbedding, UnnormalizedInput
from curator.dedup import (
    ClusterSearchIndex,
    DedupRecord,
    KMeans,
    SemanticDeduplicator,
    blocked_max_similarity,
    dedup,
    embed_corpus,
    find_duplicates_blocked,
    kmeans_fit,
    l2_normalize,
    load_index,
    save_index,
)


def unit_rows(rng, n, d):
    return l2_normalize(rng.standard_normal((n, d)))


def planted(rng, n, d, pairs, noise=1e-3):
    """``n`` random unit vectors whose first ``pairs`` rows each get a near copy appended."""
    V = unit_rows(rng, n, d)
    copies = l2_normalize(V[:pairs] + noise * rng.standard_normal((pairs, d)))
    return np.vstack([V, copies])


def brute_groups(V, eps):
    """Oracle: full similarity matrix, then connected components by graph search."""
    S = V @ V.T
    n = len(V)
    adj = (S >= 1 - eps) & ~np.eye(n, dtype=bool)
    seen, comps = set(), []
    for s in range(n):
        if s in seen or not adj[s].any():
            continue
        stack, comp = [s], set()
        while stack:
            i = stack.pop()
            if i in comp:
                continue
            comp.add(i)
            stack += list(np.nonzero(adj[i])[0])
        seen |= comp
        comps.append(comp)
    return comps


# -- k-means ------------------------------------------------------------------------

def test_two_points_two_clusters():
    m = kmeans_fit([0.0, 10.0], 2)
    assert sorted(m.centroids.ravel()) == [0, 10] and m.inertia == 0


@pytest.mark.parametrize("seed", range(6))
def test_four_points_global_optimum(seed):
    pts = np.array([0.0, 1.0, 9.0, 10.0])
    m = kmeans_fit(pts, 2, seed=seed)
    # oracle: best of every 2-partition
    best = min(
        sum(((pts[list(g)] - pts[list(g)].mean()) ** 2).sum() for g in (a, tuple(set(range(4)) - set(a))))
        for r in (1, 2, 3)
        for a in itertools.combinations(range(4), r)
    )
    assert m.inertia == pytest.approx(best) == pytest.approx(1.0)
    assert sorted(m.centroids.ravel()) == pytest.approx([0.5, 9.5])


def test_k_equals_n_and_errors(rng):
    X = rng.normal(size=(7, 3))
    assert kmeans_fit(X, 7).inertia == 0
    with pytest.raises(KTooLarge):
        kmeans_fit(X, 8)
    with pytest.raises(EmptyInput):
        kmeans_fit(np.zeros((0, 3)), 1)


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_inertia_monotone_and_deterministic(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    m = kmeans_fit(X, k, seed=seed)
    h = m.inertia_history
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))
    again = kmeans_fit(X, k, seed=seed)
    assert np.array_equal(m.centroids, again.centroids) and np.array_equal(m.labels, again.labels)
    d2 = ((X[:, None, :] - m.centroids[None]) ** 2).sum(-1)
    assert m.inertia == pytest.approx(d2.min(axis=1).sum())


def test_kmeans_estimator(rng):
    X = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
    km = KMeans(n_clusters=2, n_init=3).fit(X)
    assert len(set(km.labels_[:20])) == 1 and len(set(km.labels_[20:])) == 1
    assert km.predict([[5, 5]])[0] == km.labels_[25]
    assert km.get_params()["n_init"] == 3


# -- blocked duplicate search ----------------------------------------------------------

def test_identical_vectors_one_group():
    v = np.array([[1.0, 0.0]] * 3)
    groups = find_duplicates_blocked(v, ["a", "b", "c"], resolutions={"a": (640, 360), "b": (1920, 1080), "c": (1280, 720)})
    assert len(groups) == 1 and groups[0].members == {"a", "b", "c"} and groups[0].representative == "b"


def test_orthogonal_no_groups():
    assert find_duplicates_blocked(np.eye(4), list("abcd"), eps=0.99) == []


def test_unnormalised_rejected():
    with pytest.raises(UnnormalizedInput):
        find_duplicates_blocked(np.array([[2.0, 0.0], [1.0, 0.0]]), ["a", "b"])


def test_blocked_equals_brute_force_1000(rng):
    V = planted(rng, 950, 32, 50)
    ids = [f"c{i:04d}" for i in range(len(V))]
    got = {frozenset(g.members) for g in find_duplicates_blocked(V, ids, 0.05, block=256)}
    want = {frozenset(ids[i] for i in comp) for comp in brute_groups(V, 0.05)}
    assert got == want and len(got) == 50


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 70), block=st.integers(1, 32))
def test_blocked_max_similarity_oracle(seed, n, block):
    rng = np.random.default_rng(seed)
    V = unit_rows(rng, n, 4)
    if n > 3:
        V[3] = V[0]
    best, arg, pairs = blocked_max_similarity(V, block, threshold=0.5)
    S = V @ V.T
    np.fill_diagonal(S, -np.inf)
    assert np.allclose(best, S.max(axis=1))
    assert np.allclose(S[np.arange(n), arg], best)
    want = {(i, j) for i in range(n) for j in range(i + 1, n) if S[i, j] >= 0.5}
    assert {(i, j) for i, j, _ in pairs} == want


def test_representative_has_max_area(rng):
    V = planted(rng, 30, 8, 10)
    ids = [f"c{i}" for i in range(40)]
    res = {cid: (int(rng.integers(1, 50)), int(rng.integers(1, 50))) for cid in ids}
    for g in find_duplicates_blocked(V, ids, resolutions=res):
        area = res[g.representative][0] * res[g.representative][1]
        assert all(res[m][0] * res[m][1] <= area for m in g.members)


# -- corpus dedup -------------------------------------------------------------------------

def records_from(V, prefix="c"):
    return [DedupRecord(f"{prefix}{i:04d}", v) for i, v in enumerate(V)]


def test_no_duplicates_zero_fraction(rng):
    recs = records_from(np.eye(6))
    r = dedup(recs, kmeans_fit(np.eye(6), 2))
    assert r.removal_fraction == 0 and r.removed == set()


def test_every_clip_duplicated_once(rng):
    V = unit_rows(rng, 20, 16)
    recs = records_from(np.vstack([V, V]))
    X = np.stack([r.vector for r in recs])
    r = dedup(recs, kmeans_fit(X, 4, clip_ids=[x.clip_id for x in recs]))
    assert r.removal_fraction == 0.5
    assert r.kept | r.removed == {x.clip_id for x in recs} and not (r.kept & r.removed)


def test_single_cluster_matches_global_oracle(rng):
    V = planted(rng, 200, 16, 30)
    recs = records_from(V)
    r = dedup(recs, kmeans_fit(V, 1, clip_ids=[x.clip_id for x in recs]))
    comps = brute_groups(V, 0.05)
    expected = {recs[i].clip_id for comp in comps for i in comp} - {min(recs[i].clip_id for i in comp) for comp in comps}
    assert r.removed == expected
    assert set(r.duplicate_of()) == expected


def test_dedup_idempotent(rng):
    V = planted(rng, 100, 16, 20)
    ids = [f"c{i:04d}" for i in range(len(V))]
    first = SemanticDeduplicator(n_clusters=4).fit(V, ids)
    mask = first.keep_mask_
    second = SemanticDeduplicator(n_clusters=4).fit(V[mask], [i for i, k in zip(ids, mask) if k])
    assert second.removed_ == set()
    assert first.removal_fraction_ == pytest.approx(20 / 120)


def test_missing_embedding():
    with pytest.raises(MissingEmbedding):
        dedup([DedupRecord("a", None)], kmeans_fit(np.eye(2), 1))


# -- search ------------------------------------------------------------------------------------

def test_search_self_first_and_exact(rng):
    V = unit_rows(rng, 300, 16)
    ids = [f"v{i:03d}" for i in range(300)]
    idx = ClusterSearchIndex(n_clusters=8).fit(V, ids)
    hits = idx.search(V[42], top_k=5, n_probe=8)
    assert hits[0][0] == "v042" and hits[0][1] == pytest.approx(1.0)
    q = rng.standard_normal(16)
    sims = V @ (q / np.linalg.norm(q))
    brute = sorted(zip(ids, sims), key=lambda t: (-t[1], t[0]))[:10]
    got = idx.search(q, top_k=10, n_probe=8)
    assert [c for c, _ in got] == [c for c, _ in brute]
    assert [s for _, s in got] == pytest.approx([s for _, s in brute])


def test_search_errors(rng):
    idx = ClusterSearchIndex(n_clusters=2).fit(unit_rows(rng, 10, 4), list("abcdefghij"))
    with pytest.raises(DimensionMismatch):
        idx.search(np.ones(5))
    with pytest.raises(ValueError):
        idx.search(np.ones(4), n_probe=3)


def test_more_probes_do_not_lose_recall(rng):
    V = unit_rows(rng, 2000, 16)
    ids = [str(i) for i in range(2000)]
    idx = ClusterSearchIndex(n_clusters=16).fit(V, ids)
    Q = unit_rows(rng, 40, 16)
    recall = {}
    for probe in (1, 4, 16):
        hit = 0
        for q in Q:
            truth = set(np.argsort(-(V @ q), kind="stable")[:10].astype(str))
            hit += len(truth & {c for c, _ in idx.search(q, 10, probe)})
        recall[probe] = hit / (10 * len(Q))
    assert recall[1] <= recall[4] <= recall[16] == 1.0


def test_index_round_trip(tmp_path, rng):
    V = unit_rows(rng, 50, 8).astype(np.float32).astype(np.float64)
    ids = [f"clip-{i}-é" for i in range(50)]
    idx = ClusterSearchIndex(n_clusters=4).fit(V, ids)
    path = tmp_path / "s.idx"
    save_index(path, idx)
    back = load_index(path)
    assert back.clip_ids_ == ids and np.array_equal(back.labels_, idx.labels_)
    assert np.allclose(back.centroids_, idx.centroids_, atol=1e-6)
    q = V[7]
    assert [c for c, _ in back.search(q, 5, 4)] == [c for c, _ in idx.search(q, 5, 4)]
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CuratorError):
        load_index(path)


# -- embedding acquisition ---------------------------------------------------------------

def test_stub_embeddings():
    emb, fail = embed_corpus(["a", "a2"], StubEmbedder(512))
    assert not fail and abs(np.linalg.norm(emb["a"].vector) - 1) < 1e-6
    again, _ = embed_corpus(["a"], StubEmbedder(512))
    assert np.array_equal(emb["a"].vector, again["a"].vector)
    ids = [f"x{i}" for i in range(1000)]
    e, _ = embed_corpus(ids, StubEmbedder(512))
    sims = [e[ids[i]].vector @ e[ids[i + 1]].vector for i in range(0, 1000, 2)]
    assert max(sims) < 0.5


def test_embed_failures_recorded():
    class Broken:
        def embed(self, cid, frames):
            if cid == "bad":
                raise UnnormalizedInput("nope")
            return np.ones(3)

    emb, fail = embed_corpus(["ok", "bad"], Broken())
    assert list(emb) == ["ok"] and list(fail) == ["bad"]
