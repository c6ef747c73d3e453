import csv
import json

import pytest

from fave.checkpoint import load_checkpoint
from fave.cli import main
from fave.config import TrainConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "log.tsv"), "--users", "12", "--items", "15",
                 "--min-len", "5", "--max-len", "8", "--seed", "4"]) == 0
    assert main(["prepare", "--input", str(root / "log.tsv"), "--out", str(root / "data")]) == 0
    cfg = TrainConfig(d=16, heads=2, blocks=1, max_len=8, decoder_hidden=16, time_freqs=8,
                      batch=32, epochs1=2, epochs2=1, patience=0, seed=1)
    (root / "cfg.json").write_text(cfg.to_json())
    return root


def run_json(capsys, argv):
    capsys.readouterr()
    assert main(argv) == 0
    return capsys.readouterr().out


def test_prepare_is_byte_identical(workspace, tmp_path, capsys):
    out = run_json(capsys, ["prepare", "--input", str(workspace / "log.tsv"), "--out", str(tmp_path / "again")])
    assert json.loads(out) == {"users": 12, "items": 15, "interactions": json.loads(out)["interactions"]}
    for name in ("split.tsv", "meta.json"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_train_eval_infer_bench_dump(workspace, tmp_path, capsys):
    w = workspace
    s1, s2 = str(tmp_path / "s1.ckpt"), str(tmp_path / "s2.ckpt")
    logs = run_json(capsys, ["train", "--stage", "1", "--config", str(w / "cfg.json"),
                             "--data", str(w / "data"), "--out", s1])
    assert [json.loads(line)["epoch"] for line in logs.splitlines()] == [1, 2]
    assert load_checkpoint(s1).stage == 1
    run_json(capsys, ["train", "--stage", "2", "--config", str(w / "cfg.json"),
                      "--data", str(w / "data"), "--init", s1, "--out", s2])
    assert load_checkpoint(s2).stage == 2

    rep = json.loads(run_json(capsys, ["eval", "--ckpt", s2, "--data", str(w / "data"),
                                       "--config", str(w / "cfg.json")]))
    assert rep["sampler"] == "one_step" and len(rep["users"]) == 12
    assert {"H@10", "H@20", "N@10", "N@20", "ILD@20"} <= set(rep["metrics"])
    again = run_json(capsys, ["eval", "--ckpt", s2, "--data", str(w / "data")])
    assert json.loads(again) == rep
    summ = json.loads(run_json(capsys, ["eval", "--ckpt", s2, "--data", str(w / "data"),
                                        "--sampler", "euler:3", "--summary", "--split", "valid"]))
    assert summ["sampler"] == "euler:3" and "users" not in summ

    lines = run_json(capsys, ["infer", "--ckpt", s2, "--data", str(w / "data"),
                              "--users", "0,3", "--k", "4"]).splitlines()
    recs = [json.loads(x) for x in lines]
    assert [r["user"] for r in recs] == [0, 3] and all(len(r["items"]) == 4 for r in recs)

    b1 = json.loads(run_json(capsys, ["bench", "--ckpt", s2, "--data", str(w / "data"),
                                      "--sampler", "one_step", "--warmup", "1", "--samples", "3"]))
    be = json.loads(run_json(capsys, ["bench", "--ckpt", s2, "--data", str(w / "data"),
                                      "--sampler", "euler:1", "--warmup", "1", "--samples", "3"]))
    assert b1["gflops_per_sample"] == be["gflops_per_sample"]

    out = tmp_path / "traj.csv"
    run_json(capsys, ["dump-trajectory", "--ckpt", s2, "--data", str(w / "data"),
                      "--out", str(out), "--steps", "4", "--users", "2"])
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["user", "step", "t"] + [f"dim{j}" for j in range(16)]
    assert len(rows) == 1 + 2 * 5
    assert [float(r[2]) for r in rows[1::2]] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_eval_untrained_is_random(tmp_path, capsys):
    # an untrained model ranks close to chance: H@10 ~ 100 * 10 / |I|
    log = tmp_path / "log.tsv"
    assert main(["synth", "--out", str(log), "--users", "600", "--items", "200",
                 "--min-len", "5", "--max-len", "6", "--seed", "1"]) == 0
    assert main(["prepare", "--input", str(log), "--out", str(tmp_path / "d")]) == 0
    cfg = TrainConfig(d=16, heads=2, blocks=1, max_len=8, decoder_hidden=16, time_freqs=8,
                      batch=256, epochs1=0, patience=0, seed=3)
    (tmp_path / "c.json").write_text(cfg.to_json())
    ck = str(tmp_path / "u.ckpt")
    capsys.readouterr()
    assert main(["train", "--stage", "1", "--config", str(tmp_path / "c.json"),
                 "--data", str(tmp_path / "d"), "--out", ck]) == 0
    rep = json.loads(run_json(capsys, ["eval", "--ckpt", ck, "--data", str(tmp_path / "d"), "--summary"]))
    # about 195 candidates per user after excluding the history
    p = 10 / 195
    sigma = 100 * (p * (1 - p) / 600) ** 0.5
    assert abs(rep["metrics"]["H@10"] - 100 * p) <= 3 * sigma


def test_error_exits(workspace, tmp_path, capsys):
    w = workspace
    assert main(["prepare", "--input", str(tmp_path / "missing.tsv"), "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("1 2 3\nx y z\n")
    capsys.readouterr()
    assert main(["prepare", "--input", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "bad.tsv:2:" in capsys.readouterr().err
    s1 = str(tmp_path / "s1.ckpt")
    assert main(["train", "--stage", "1", "--config", str(w / "cfg.json"),
                 "--data", str(w / "data"), "--out", s1]) == 0
    other = TrainConfig.load(w / "cfg.json").replace(gamma=0.0)
    (tmp_path / "other.json").write_text(other.to_json())
    capsys.readouterr()
    assert main(["eval", "--ckpt", s1, "--data", str(w / "data"), "--config", str(tmp_path / "other.json")]) == 2
    assert "config mismatch" in capsys.readouterr().err
    assert main(["train", "--stage", "2", "--config", str(w / "cfg.json"),
                 "--data", str(w / "data"), "--out", str(tmp_path / "s2.ckpt")]) == 2
    assert main(["eval", "--ckpt", s1, "--data", str(w / "data"), "--sampler", "euler:0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--bogus"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        main(["frobnicate"])
