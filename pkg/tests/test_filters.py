import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curator.errors import CategoryMismatch, DimensionMismatch, NonFiniteWeight, ZeroObserved
from curator.filters import (
    CATEGORY_TARGETS,
    CategoryResampler,
    FilterVerdict,
    FlowField,
    MlpClassifier,
    MlpWeights,
    MotionClassifier,
    MotionStats,
    MotionThresholds,
    PercentileCut,
    Reason,
    aesthetic_gate,
    classify_motion,
    estimate_flow_block,
    load_mlp_weights,
    mlp_infer,
    motion_stats,
    percentile_cut,
    resample_weights,
)


def field_of(vectors, block=16, conf=1.0):
    vectors = np.asarray(vectors, dtype=float)
    gh, gw = vectors.shape[:2]
    return FlowField(vectors, np.full((gh, gw), conf), block, gw * block, gh * block)


# -- block matching ------------------------------------------------------------------

def test_identical_frames_zero_flow(rng):
    a = rng.integers(0, 256, (32, 48)).astype(np.uint8)
    f = estimate_flow_block(a, a)
    assert f.vectors.shape == (2, 3, 2) and not f.vectors.any()


def test_shift_right_four(rng):
    a = rng.integers(0, 256, (64, 64)).astype(np.uint8)
    b = np.roll(a, 4, axis=1)
    f = estimate_flow_block(a, b)
    assert np.median(f.vectors[..., 0]) == 4 and np.median(f.vectors[..., 1]) == 0


def test_flat_frames_tie_break():
    a = np.full((32, 32), 90, np.uint8)
    f = estimate_flow_block(a, a.copy())
    assert not f.vectors.any() and not f.confidence.any()


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        estimate_flow_block(np.zeros((8, 8)), np.zeros((8, 9)))


def test_grid_dims_ceil():
    f = estimate_flow_block(np.zeros((17, 33)), np.zeros((17, 33)), block=8, search_radius=1)
    assert f.confidence.shape == (3, 5)


def brute_sad(a, b, y0, x0, block, dx, dy):
    h, w = a.shape
    y1, x1 = min(y0 + block, h), min(x0 + block, w)
    if y0 + dy < 0 or x0 + dx < 0 or y1 + dy > h or x1 + dx > w:
        return None
    return int(np.abs(a[y0:y1, x0:x1].astype(int) - b[y0 + dy : y1 + dy, x0 + dx : x1 + dx].astype(int)).sum())


@given(seed=st.integers(0, 10_000), block=st.sampled_from([3, 4, 5]), radius=st.integers(0, 2))
def test_returned_vector_minimises_sad(seed, block, radius):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 8, (9, 11))
    b = rng.integers(0, 8, (9, 11))
    f = estimate_flow_block(a, b, block, radius)
    for gy in range(f.confidence.shape[0]):
        for gx in range(f.confidence.shape[1]):
            y0, x0 = gy * block, gx * block
            cands = {
                (dx, dy): brute_sad(a, b, y0, x0, block, dx, dy)
                for dx in range(-radius, radius + 1)
                for dy in range(-radius, radius + 1)
            }
            cands = {k: v for k, v in cands.items() if v is not None}
            best = min(cands.values())
            dx, dy = f.vectors[gy, gx].astype(int)
            assert cands[(dx, dy)] == best
            winners = [k for k, v in cands.items() if v == best]
            assert (dx, dy) == min(winners, key=lambda v: (abs(v[0]) + abs(v[1]), v))
            worst = max(cands.values())
            assert f.confidence[gy, gx] == pytest.approx(1 - best / worst if worst else 0.0)


# -- motion statistics ---------------------------------------------------------------

def test_stats_zero_flow():
    s = motion_stats([field_of(np.zeros((3, 3, 2)))])
    assert s.mean_magnitude == 0 and s.angular_coherence == 0


def test_stats_uniform_flow():
    v = np.zeros((3, 4, 2))
    v[..., 0] = 4
    s = motion_stats([field_of(v)])
    assert s.mean_vector == pytest.approx((4, 0)) and s.angular_coherence == pytest.approx(1)


def test_stats_opposed_halves():
    v = np.zeros((2, 4, 2))
    v[:, :2, 0] = 4
    v[:, 2:, 0] = -4
    s = motion_stats([field_of(v)])
    assert s.mean_vector == pytest.approx((0, 0))
    assert s.angular_coherence == pytest.approx(0, abs=1e-12)
    assert s.mean_magnitude == pytest.approx(4)


def test_stats_low_confidence_ignored_and_variance():
    v = np.zeros((2, 2, 2))
    v[..., 1] = 3
    s = motion_stats([field_of(v), field_of(np.zeros((2, 2, 2))), field_of(v * 10, conf=0.05)])
    # per-frame means 3, 0, 0 (third frame has no confident blocks)
    assert s.temporal_variance == pytest.approx(np.var([3, 0, 0]))
    assert s.mean_magnitude == pytest.approx(1.5)


@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=4, max_size=4))
def test_stats_invariants(vs):
    s = motion_stats([field_of(np.array(vs, dtype=float).reshape(2, 2, 2))])
    assert 0 <= s.angular_coherence <= 1
    assert s.mean_magnitude >= math.hypot(*s.mean_vector) - 1e-9


# -- motion classification ------------------------------------------------------------

def stats(mag=4.0, vec=(4.0, 0.0), coh=0.95, var=0.0, radial=0.0):
    return MotionStats(mag, vec, coh, var, radial)


def test_static_fails():
    v = classify_motion(stats(mag=0.1, vec=(0.1, 0)), MotionThresholds(static=0.5))
    assert not v.passed and v.reason is Reason.STATIC


def test_pan_and_tilt():
    assert classify_motion(stats()).tags == {"pan"}
    assert classify_motion(stats(vec=(0.5, -3.0))).tags == {"tilt"}


def test_shaky_fails():
    v = classify_motion(stats(coh=0.1, var=9.0))
    assert not v.passed and v.reason is Reason.SHAKY


def test_zoom_field():
    gh, gw, block = 8, 8, 16
    f = field_of(np.zeros((gh, gw, 2)), block)
    centre = np.array([f.width / 2, f.height / 2])
    f.vectors = 0.02 * (f.block_centers() - centre)
    v = classify_motion(motion_stats([f]))
    assert v.passed and "zoom" in v.tags and "pan" not in v.tags


GRID = [
    (mag, coh, var)
    for mag in (0.0, 0.29, 0.3, 2.0)
    for coh in (0.0, 0.29, 0.3, 0.69, 0.7, 1.0)
    for var in (0.0, 4.0, 4.01)
]


@pytest.mark.parametrize("mag,coh,var", GRID)
def test_classify_golden_grid(mag, coh, var):
    got = classify_motion(stats(mag=mag, vec=(mag, 0.0), coh=coh, var=var))
    if mag < 0.3:
        expected = (False, Reason.STATIC, {"static"})
    elif var > 4.0 and coh < 0.3:
        expected = (False, Reason.SHAKY, {"shaky"})
    else:
        expected = (True, None, {"pan"} if coh >= 0.7 else set())
    assert (got.passed, got.reason, got.tags) == expected
    assert got == classify_motion(stats(mag=mag, vec=(mag, 0.0), coh=coh, var=var))


def test_motion_classifier_estimator():
    clf = MotionClassifier(static_threshold=0.5).fit()
    assert clf.get_params()["static_threshold"] == 0.5
    assert clf.predict([stats(mag=0.1), stats()]).tolist() == [False, True]
    assert clf.verdicts([stats()], ["c1"])[0].clip_id == "c1"


def test_failing_verdict_needs_reason():
    with pytest.raises(ValueError):
        FilterVerdict("c", False)


# -- percentile cut --------------------------------------------------------------------

def test_percentile_examples():
    scored = {f"c{i:03d}": float(i) for i in range(1, 101)}
    thr, removed = percentile_cut(scored, 0.15)
    assert removed == {f"c{i:03d}" for i in range(1, 16)} and thr == 15.0
    assert percentile_cut(scored, 0) == (-math.inf, set())
    ties = {f"c{i}": 1.0 for i in range(10)}
    assert percentile_cut(ties, 0.15) == (1.0, {"c0"})


@given(st.lists(st.floats(-1e6, 1e6), max_size=60), st.floats(0, 0.999))
def test_percentile_removes_exact_count(scores, fraction):
    scored = [(f"id{i:03d}", s) for i, s in enumerate(scores)]
    thr, removed = percentile_cut(scored, fraction)
    from fractions import Fraction

    assert len(removed) == math.floor(Fraction(str(fraction)) * len(scores))
    # oracle: everything kept is ranked at or above everything removed
    kept = [kv for kv in scored if kv[0] not in removed]
    if removed and kept:
        assert min((s, c) for c, s in kept) > max((s, c) for c, s in scored if c in removed)


def test_percentile_rejects_bad_fraction():
    with pytest.raises(ValueError):
        percentile_cut({}, 1.0)


def test_percentile_estimator():
    cut = PercentileCut(0.2)
    kept = cut.fit_transform([5, 1, 3, 2, 4], ["a", "b", "c", "d", "e"])
    assert kept == ["a", "c", "d", "e"] and cut.threshold_ == 1.0


# -- aesthetic gate --------------------------------------------------------------------

@pytest.mark.parametrize("score,ok", [(3.5, True), (3.4999, False), (9.0, True)])
def test_aesthetic_gate(score, ok):
    assert aesthetic_gate(score) is ok


def test_aesthetic_gate_nonfinite():
    with pytest.raises(ValueError):
        aesthetic_gate(float("nan"))


# -- MLP heads -----------------------------------------------------------------------------

def test_zero_mlp_is_half():
    w = MlpWeights([(np.zeros((3, 4)), np.zeros(3)), (np.zeros((1, 3)), np.zeros(1))])
    assert mlp_infer(np.ones(4), w) == pytest.approx([0.5])


def test_hand_forward_pass():
    w = MlpWeights([(np.eye(2), np.zeros(2)), (np.array([[1.0, -1.0]]), np.zeros(1))])
    assert mlp_infer([1.0, 0.0], w)[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-4)
    assert mlp_infer([1.0, 0.0], w)[0] == pytest.approx(0.7311, abs=1e-4)


def test_equal_logits_uniform():
    w = MlpWeights([(np.zeros((4, 3)), np.full(4, 2.0))])
    assert mlp_infer(np.ones(3), w) == pytest.approx([0.25] * 4)


@given(seed=st.integers(0, 1000), shift=st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    w1, b1 = rng.normal(size=(5, 4)), rng.normal(size=5)
    w2, b2 = rng.normal(size=(3, 5)), rng.normal(size=3)
    x = rng.normal(size=4)
    p = mlp_infer(x, MlpWeights([(w1, b1), (w2, b2)]))
    q = mlp_infer(x, MlpWeights([(w1, b1), (w2, b2 + shift)]))
    assert p.sum() == pytest.approx(1, abs=1e-9)
    assert np.argmax(p) == np.argmax(q)
    # oracle: explicit loop forward pass
    h = [max(0.0, sum(w1[i, j] * x[j] for j in range(4)) + b1[i]) for i in range(5)]
    z = [sum(w2[k, i] * h[i] for i in range(5)) + b2[k] for k in range(3)]
    e = [math.exp(v - max(z)) for v in z]
    assert p == pytest.approx([v / sum(e) for v in e], abs=1e-12)


def test_mlp_errors():
    with pytest.raises(DimensionMismatch):
        MlpWeights([(np.eye(2), np.zeros(2)), (np.ones((1, 3)), np.zeros(1))])
    with pytest.raises(NonFiniteWeight):
        MlpWeights([(np.array([[np.inf]]), np.zeros(1))])
    w = MlpWeights([(np.eye(2), np.zeros(2))])
    with pytest.raises(DimensionMismatch):
        mlp_infer(np.ones(3), w)


def test_weights_file_round_trip(tmp_path, rng):
    w = MlpWeights([(rng.normal(size=(3, 2)), rng.normal(size=3)), (rng.normal(size=(1, 3)), np.zeros(1))], "sigmoid")
    path = tmp_path / "w.json"
    path.write_text(json.dumps(w.to_json()))
    back = load_mlp_weights(path)
    x = rng.normal(size=(4, 2))
    assert np.allclose(mlp_infer(x, back), mlp_infer(x, w))
    bad = w.to_json()
    bad["layers"][0]["rows"] = 4
    with pytest.raises(DimensionMismatch):
        MlpWeights.from_json(bad)


def test_mlp_classifier_binary_and_multiclass():
    binary = MlpClassifier(MlpWeights([(np.array([[1.0, 0.0]]), np.zeros(1))])).fit()
    assert binary.predict([[2.0, 0.0], [-2.0, 0.0]]).tolist() == [1, 0]
    assert binary.predict_proba([[0.0, 0.0]]).tolist() == [[0.5, 0.5]]
    multi = MlpClassifier(MlpWeights([(np.eye(3), np.zeros(3))]), classes=["a", "b", "c"]).fit()
    assert multi.predict([[0, 5, 1], [9, 0, 0]]).tolist() == ["b", "a"]
    with pytest.raises(DimensionMismatch):
        MlpClassifier(MlpWeights([(np.eye(3), np.zeros(3))]), classes=["a", "b"]).fit()


# -- resampling -------------------------------------------------------------------------------

def test_resample_identity():
    d = {"a": 0.2, "b": 0.8}
    assert resample_weights(d, d) == {"a": 1.0, "b": 1.0}


def test_resample_hand_example():
    got = resample_weights({"A": 0.5, "B": 0.5}, {"A": 0.25, "B": 0.75})
    assert got == pytest.approx({"A": 1 / 3, "B": 1.0})


def test_resample_uniform_to_targets():
    cats = list(CATEGORY_TARGETS)
    assert len(cats) == 9
    observed = {c: 1 / 9 for c in cats}
    target = {c: CATEGORY_TARGETS[c] / 100 for c in cats}
    acc = resample_weights(observed, target)
    assert acc["nature_dynamics"] == 1.0
    for c in cats:
        assert acc[c] == pytest.approx(CATEGORY_TARGETS[c] / 20)
    assert CATEGORY_TARGETS["driving"] == 11


def test_resample_errors():
    with pytest.raises(CategoryMismatch):
        resample_weights({"a": 1.0}, {"b": 1.0})
    with pytest.raises(ZeroObserved):
        resample_weights({"a": 0.0, "b": 1.0}, {"a": 0.5, "b": 0.5})
    with pytest.raises(ValueError):
        resample_weights({"a": 0.5, "b": 0.4}, {"a": 0.5, "b": 0.5})


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=8), st.integers(0, 10_000))
def test_resample_expected_equals_target(obs_raw, seed):
    rng = np.random.default_rng(seed)
    tgt_raw = rng.random(len(obs_raw)) + 0.01
    cats = [f"k{i}" for i in range(len(obs_raw))]
    obs = dict(zip(cats, np.array(obs_raw) / sum(obs_raw)))
    tgt = dict(zip(cats, tgt_raw / tgt_raw.sum()))
    acc = resample_weights(obs, tgt)
    assert all(0 < a <= 1 for a in acc.values()) and max(acc.values()) == 1.0
    kept = {c: obs[c] * acc[c] for c in cats}
    total = sum(kept.values())
    for c in cats:
        assert kept[c] / total == pytest.approx(tgt[c], abs=1e-9)


def test_category_resampler():
    labels = ["driving"] * 60 + ["nature_dynamics"] * 40
    r = CategoryResampler(target={"driving": 1, "nature_dynamics": 1}).fit(labels)
    assert r.acceptance_ == pytest.approx({"driving": 40 / 60, "nature_dynamics": 1.0})
    assert r.expected_distribution() == pytest.approx({"driving": 0.5, "nature_dynamics": 0.5})
    keys = [f"c{i}" for i in range(100)]
    mask = r.sample(labels, keys)
    assert mask[60:].all() and np.array_equal(mask, r.sample(labels, keys))
    with pytest.raises(CategoryMismatch):
        CategoryResampler().fit(["unicorns"])
    with pytest.raises(ZeroObserved):
        CategoryResampler().fit([])
