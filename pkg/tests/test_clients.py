import base64
import json

import numpy as np
import pytest

from curator.clients import (
    DETECTOR_SIZE,
    CaptionClient,
    ContentEmbedder,
    DetectorClient,
    EmbedderClient,
    ScorerClient,
    StubCaptioner,
    StubDetector,
    StubEmbedder,
    StubScorer,
    encode_frames,
    stable_uniform,
)
from curator.errors import ClientUnavailable, MalformedResponse

from conftest import solid


def frames(n, h=30, w=40):
    return [solid(h, w, (i % 256, 10, 20)) for i in range(n)]


def test_detector_request_layout(http_service):
    http_service.responder = lambda path, body: (200, [0.0] * 100)
    client = DetectorClient(http_service.url + "/detect")
    assert client.predict(frames(100)) == [0.0] * 100
    path, ctype, body = http_service.requests[0]
    w, h = DETECTOR_SIZE
    assert path == "/detect" and ctype == "application/octet-stream"
    assert len(body) == 100 * w * h * 3
    # frame 7 is the solid colour (7, 10, 20)
    chunk = np.frombuffer(body[7 * w * h * 3 : 8 * w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    assert (chunk == (7, 10, 20)).all()


@pytest.mark.parametrize(
    "payload",
    [[0.1] * 99, {"p": [0.1] * 100}, [1.5] + [0.0] * 99, ["x"] * 100, b"not json"],
)
def test_detector_rejects_malformed(http_service, payload):
    http_service.responder = lambda path, body: (200, payload)
    with pytest.raises(MalformedResponse):
        DetectorClient(http_service.url).predict(frames(100))


def test_http_error_and_unreachable(http_service):
    http_service.responder = lambda path, body: (503, {"error": "busy"})
    with pytest.raises(ClientUnavailable):
        ScorerClient(http_service.url).score("c", frames(2))
    with pytest.raises(ClientUnavailable):
        ScorerClient("http://127.0.0.1:9/none", timeout=0.5).score("c", frames(2))


def test_caption_client_truncates(http_service):
    http_service.responder = lambda path, body: (200, {"caption": "x" * 5000})
    text = CaptionClient(http_service.url).caption("clip", "describe", frames(3))
    assert text == "x" * 2048
    req = json.loads(http_service.requests[0][2])
    assert req["clip_id"] == "clip" and req["prompt"] == "describe" and len(req["frames"]) == 3
    raw = base64.b64decode(req["frames"][0])
    assert len(raw) == 224 * 224 * 3


def test_caption_client_malformed(http_service):
    http_service.responder = lambda path, body: (200, {"text": "hi"})
    with pytest.raises(MalformedResponse):
        CaptionClient(http_service.url).caption("c", "p", frames(1))


def test_embedder_client_normalises(http_service):
    http_service.responder = lambda path, body: (200, {"vector": [3.0, 4.0]})
    v = EmbedderClient(http_service.url, dim=2).embed("c", frames(1))
    assert v == pytest.approx([0.6, 0.8])
    http_service.responder = lambda path, body: (200, {"vector": [0.0, 0.0]})
    with pytest.raises(MalformedResponse):
        EmbedderClient(http_service.url, dim=2).embed("c", frames(1))
    http_service.responder = lambda path, body: (200, {"vector": [1.0]})
    with pytest.raises(MalformedResponse):
        EmbedderClient(http_service.url, dim=2).embed("c", frames(1))


@pytest.mark.parametrize("payload", [{"score": "nan"}, {"value": 1.0}, [1.0]])
def test_scorer_malformed(http_service, payload):
    http_service.responder = lambda path, body: (200, payload)
    with pytest.raises(MalformedResponse):
        ScorerClient(http_service.url).score("c", frames(1))


def test_scorer_ok(http_service):
    http_service.responder = lambda path, body: (200, {"score": 4.25})
    assert ScorerClient(http_service.url).score("c", frames(8)) == 4.25


def test_encode_frames_resizes():
    out = encode_frames([solid(3, 5, (1, 2, 3))], size=(4, 2))
    assert np.frombuffer(base64.b64decode(out[0]), dtype=np.uint8).tolist() == [1, 2, 3] * 8


def test_stubs_are_deterministic():
    assert StubScorer(2.5, 7.5, "a").score("x") == StubScorer(2.5, 7.5, "a").score("x")
    s = StubScorer(2.5, 7.5, "a").score("x")
    assert 2.5 <= s < 7.5
    assert s == pytest.approx(2.5 + 5 * stable_uniform("a", "x"))
    e = StubEmbedder(16)
    assert np.allclose(e.embed("x"), e.embed("x")) and np.linalg.norm(e.embed("x")) == pytest.approx(1)
    assert not np.allclose(e.embed("x"), e.embed("y"))
    assert StubCaptioner("fixed").caption("a", "p", []) == "fixed"
    assert StubCaptioner().caption("a", "p", []) != StubCaptioner().caption("b", "p", [])
    d = StubDetector(value=0.25)
    assert d.predict(frames(3)) == [0.25] * 3 and d.calls == 1
    with pytest.raises(MalformedResponse):
        StubDetector(fn=lambda f: [0.1]).predict(frames(3))


def test_content_embedder_matches_identical_content(rng):
    emb = ContentEmbedder(dim=32)
    tex = rng.integers(0, 256, (24, 32, 3), dtype=np.uint8)
    other = rng.integers(0, 256, (24, 32, 3), dtype=np.uint8)
    a, b, c = emb.embed("a", [tex]), emb.embed("b", [tex.copy()]), emb.embed("c", [other])
    assert a @ b == pytest.approx(1.0)
    assert a @ c < 0.9
    with pytest.raises(MalformedResponse):
        emb.embed("x", [])
