import io
import json

import numpy as np
import pytest

from curator.cli import EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, cmd_eval_split, cmd_split, main
from curator.config import load_config
from curator.shard_store import TERMINAL, Manifest, read_shard
from curator.synth import ShotPlan, make_corpus, write_video


@pytest.fixture
def corpus(tmp_path):
    videos = tmp_path / "videos"
    make_corpus(videos, 3, seed=5, cuts=(1, 2), shot_len=(30, 40), fps=(12, 1), duplicates=1)
    (videos / "gt.jsonl").unlink()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "input_dir": str(videos),
        "manifest": str(tmp_path / "out" / "manifest.jsonl"),
        "shard_out": str(tmp_path / "out" / "shards"),
    }))
    return tmp_path, cfg


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def lines(tmp_path):
    return (tmp_path / "out" / "manifest.jsonl").read_text().count("\n")


def test_two_shot_video_gives_two_clips(tmp_path):
    video = tmp_path / "two.y4m"
    write_video(video, [ShotPlan(60, 0.1), ShotPlan(60, 0.6)], fps=(24, 1))
    cfg = load_config(overrides={"manifest": str(tmp_path / "m.jsonl")}, env={})
    buf = io.StringIO()
    assert cmd_split(cfg, [str(video)], buf) == EXIT_OK
    entries = sorted(Manifest(tmp_path / "m.jsonl").scan(), key=lambda e: e.start_frame)
    assert [(e.start_frame, e.end_frame, e.status) for e in entries] == [(0, 60, "split"), (60, 120, "split")]
    assert cmd_split(cfg, [str(video)], buf) == EXIT_OK
    assert json.loads(buf.getvalue().split("\n}\n")[1] + "\n}")["new_clips"] == 0
    assert len(Manifest(tmp_path / "m.jsonl").scan()) == 2


def test_stage_commands_end_to_end(corpus, capsys):
    tmp_path, cfg = corpus
    c = ["--config", str(cfg)]
    assert run(capsys, "split", *c)[0] == EXIT_OK
    code = main(["dedup", *c])
    assert code == EXIT_USAGE and "filter stage" in capsys.readouterr().err
    code = main(["shard", *c])
    assert code == EXIT_USAGE
    capsys.readouterr()
    for stage in ("filter", "annotate", "dedup", "shard"):
        code, out = run(capsys, stage, *c)
        assert code == EXIT_OK, (stage, out)
    m = Manifest(tmp_path / "out" / "manifest.jsonl")
    statuses = {e.status for e in m.scan()}
    assert statuses <= TERMINAL and "sharded" in statuses
    twins = {"vid000": "dup000", "dup000": "vid000"}
    for e in m.scan(status="deduped_out"):
        rep = m.get(next(t.split(":", 1)[1] for t in e.tags if t.startswith("duplicate_of:")))
        assert twins.get(e.source_id) == rep.source_id and rep.start_frame == e.start_frame
    for e in m.scan(status="sharded"):
        assert e.shard_ref and e.bucket and e.caption_refs

    # idempotence: nothing new to do, manifest unchanged
    before = lines(tmp_path)
    for stage in ("split", "filter", "annotate", "dedup", "shard"):
        assert run(capsys, stage, *c)[0] == EXIT_OK
    assert lines(tmp_path) == before

    index = json.loads((tmp_path / "out" / "shards" / "index.json").read_text())
    shard = tmp_path / "out" / "shards" / index["shards"][0]["path"]
    key, meta, payload = read_shard(shard)[0]
    assert payload.startswith(b"YUV4MPEG2") and meta["clip_id"] == key


def test_search_returns_query_first(corpus, capsys):
    tmp_path, cfg = corpus
    assert main(["run", "--config", str(cfg), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    m = Manifest(tmp_path / "out" / "manifest.jsonl")
    clip = sorted(e.clip_id for e in m.scan(status="sharded"))[0]
    capsys.readouterr()
    code, out = run(capsys, "search", "--config", str(cfg), "--query-clip", clip, "--topk", "3")
    hits = json.loads(out)
    assert code == EXIT_OK and hits[0]["clip_id"] == clip and hits[0]["score"] == pytest.approx(1.0, abs=1e-5)
    vec = np.load(tmp_path / "out" / "work" / m.get(clip).embedding_ref)
    np.save(tmp_path / "q.npy", vec)
    code, out = run(capsys, "search", "--config", str(cfg), "--vector-file", str(tmp_path / "q.npy"))
    assert json.loads(out)[0]["clip_id"] == clip
    assert main(["search", "--config", str(cfg), "--query-clip", "nope"]) == EXIT_USAGE


def test_run_simulate_writes_only_report(corpus, capsys):
    tmp_path, cfg = corpus
    code, out = run(capsys, "run", "--config", str(cfg), "--simulate")
    doc = json.loads(out)
    assert code == EXIT_OK and doc["mode"] == "simulate" and doc["items_in"] == 4
    assert not (tmp_path / "out").exists()


def test_run_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, out = run(capsys, "run", str(tmp_path / "empty"), "--manifest", str(tmp_path / "m.jsonl"))
    doc = json.loads(out)
    assert code == EXIT_OK and doc["items_in"] == 0 and doc["items_out"] == 0


def test_partial_failure_exit_one(tmp_path, capsys):
    good = tmp_path / "good.y4m"
    write_video(good, [ShotPlan(30, 0.2)], fps=(12, 1))
    bad = tmp_path / "bad.y4m"
    bad.write_bytes(good.read_bytes()[:-100])
    code, out = run(capsys, "split", str(good), str(bad), "--manifest", str(tmp_path / "m.jsonl"))
    doc = json.loads(out)
    assert code == EXIT_PARTIAL and list(doc["failed"]) == [str(bad)]


def test_eval_split_cli(tmp_path, capsys):
    pred, gt = tmp_path / "p.jsonl", tmp_path / "g.jsonl"
    pred.write_text('{"frame": 10}\n{"frame": 50}\n')
    gt.write_text('{"frame": 11}\n{"frame": 80}\n')
    buf = io.StringIO()
    assert cmd_eval_split(str(pred), str(gt), 2, buf) == EXIT_OK
    doc = json.loads(buf.getvalue())
    assert (doc["precision"], doc["recall"], doc["f1"]) == (0.5, 0.5, 0.5)
    code, out = run(capsys, "eval-split", str(gt), str(gt))
    doc = json.loads(out)
    assert code == EXIT_OK and (doc["precision"], doc["recall"], doc["f1"]) == (1, 1, 1)
    assert main(["eval-split", str(tmp_path / "missing"), str(gt)]) == EXIT_USAGE


@pytest.mark.parametrize(
    "argv",
    [["bogus"], ["run", "--profile", "party"], ["split", "--config", "/no/such.json"], ["search", "--topk", "3"]],
)
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"colour": "blue"}')
    assert main(["split", "--config", str(cfg)]) == EXIT_USAGE


def test_synth_and_detect(tmp_path, capsys):
    code, out = run(capsys, "synth", str(tmp_path / "s"), "--videos", "3", "--fps", "12", "--seed", "2")
    assert code == EXIT_OK and json.loads(out)["videos"] == 3
    code, out = run(capsys, "detect", str(tmp_path / "s"), "--out", str(tmp_path / "pred.jsonl"))
    assert code == EXIT_OK
    code, out = run(capsys, "eval-split", str(tmp_path / "pred.jsonl"), str(tmp_path / "s" / "gt.jsonl"))
    assert json.loads(out)["f1"] == 1.0
