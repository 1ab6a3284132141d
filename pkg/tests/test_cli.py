from __future__ import annotations

import json

import pytest

from manasim import cli


def out_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_run_twice_same_trace(tmp_path, capsys):
    args = ["run", "--workload", "stencil-2d", "--world-size", "3", "--steps", "2", "--seed", "4", "--json"]
    assert cli.main(args + ["--trace", str(tmp_path / "a")]) == 0
    a = out_json(capsys)
    assert cli.main(args + ["--trace", str(tmp_path / "b")]) == 0
    assert out_json(capsys)["digest"] == a["digest"]
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_trace_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MANA_SIM_TRACE_DIR", str(tmp_path))
    assert cli.main(["run", "--world-size", "2", "--steps", "1", "--json"]) == 0
    assert out_json(capsys)["trace"].startswith(str(tmp_path))


def test_ckpt_run_restart_cross_engine(tmp_path, capsys):
    common = ["--workload", "ring-pingpong", "--world-size", "4", "--steps", "2", "--json"]
    assert cli.main(["run", *common]) == 0
    want = out_json(capsys)["digest"]
    img = tmp_path / "img"
    assert cli.main(["ckpt-run", *common, "--ckpt-at-event", "30", "--image-dir", str(img),
                     "--trace", str(tmp_path / "t")]) == 0
    assert out_json(capsys)["digest"] == want
    for engine in ("linear", "binomial"):
        assert cli.main(["restart", "--image-dir", str(img), "--engine", engine, "--json"]) == 0
        assert out_json(capsys)["digest"] == want
    assert cli.main(["metrics", str(tmp_path / "t"), "--json"]) == 0
    m = out_json(capsys)
    assert m["extra-barriers"] == m["collectives"] and m["ctl-messages"] > 0


def test_exit_codes(tmp_path, capsys):
    img = tmp_path / "img"
    cli.main(["ckpt-run", "--world-size", "2", "--steps", "1", "--ckpt-at-event", "3",
              "--image-dir", str(img)])
    (img / "rank-1.img").unlink()
    assert cli.main(["restart", "--image-dir", str(img)]) == cli.EXIT_CORRUPT
    (img / "rank-0.img").write_bytes(b"MANA-SIM\x01\x00")
    (tmp_path / "bad").write_text("{oops\n")
    assert cli.main(["metrics", str(tmp_path / "bad")]) == cli.EXIT_USAGE
    rep = tmp_path / "rep.json"
    code = cli.main(["explore", "--scenario", "w2-barrier", "--mutant", "skip-extra-iteration",
                     "--report", str(rep)])
    assert code == cli.EXIT_VIOLATION
    cx = tmp_path / "cx.json"
    cx.write_text(json.dumps(json.loads(rep.read_text())[0]["violations"][0]))
    assert cli.main(["replay", "--scenario", "w2-barrier", "--mutant", "skip-extra-iteration",
                     "--schedule", str(cx)]) == cli.EXIT_VIOLATION
    assert cli.main(["replay", "--scenario", "w3-allreduce", "--schedule", str(cx)]) == cli.EXIT_EXHAUSTED
    assert cli.main(["explore", "--scenario", "w2-barrier", "--mutant", "strict-gate"]) == cli.EXIT_DEADLOCK
    assert cli.main(["explore", "--scenario", "w2-barrier"]) == 0


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.conf"
    cfg.write_text("workload = comm-split-mix\nworld-size = 4\nsteps = 1  # short\n")
    assert cli.main(["run", "--config", str(cfg), "--json"]) == 0
    a = out_json(capsys)
    (tmp_path / "c.json").write_text(json.dumps({"workload": "comm-split-mix", "world-size": 4, "steps": 1}))
    assert cli.main(["run", "--config", str(tmp_path / "c.json"), "--json"]) == 0
    assert out_json(capsys) == a
    assert cli.main(["run", "--config", str(cfg), "--steps", "2", "--json"]) == 0
    assert out_json(capsys)["digest"] != a["digest"]


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["run", "--engine", "ring"])
    assert e.value.code == cli.EXIT_USAGE
    assert cli.main(["ckpt-run", "--world-size", "2"]) == cli.EXIT_USAGE


def test_metrics_exact_counts():
    trace = [
        {"id": 0, "actor": "r0", "kind": "app", "detail": {"effects": [
            {"kind": "enter-collective", "phase": 1}, {"kind": "enter-collective", "phase": 2},
            {"kind": "ctl-send"}, {"kind": "coord-note", "note": "extra-iteration"},
            {"kind": "coord-note", "note": "commit"}, {"kind": "image-write", "drained": 3}]}},
    ]
    assert cli.metrics(trace) == {"collectives": 1, "extra-barriers": 1, "ctl-messages": 1,
                                  "extra-iteration-rounds": 1, "drained": 3}
