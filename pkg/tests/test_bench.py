import csv
import hashlib
import json
import logging

import numpy as np
import pytest

from pomo import bench
from pomo.cli import main
from pomo.instances import load_dataset, make_dataset, save_dataset
from pomo.model import load_checkpoint


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny TSP6 checkpoint plus a dataset, shared by the eval tests."""
    root = tmp_path_factory.mktemp("bench")
    cfg = {"problem": "tsp", "size": 6, "epochs": 1, "instances_per_epoch": 256,
           "model": {"d_h": 16, "n_layers": 1, "n_heads": 4, "d_ff": 32}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == 0
    assert main(["generate", "--kind", "tsp", "--size", "6", "--count", "40", "--seed", "3",
                 "--out", str(root / "tsp6.bin")]) == 0
    return root


def test_generate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "1", "generate", "--kind", "tsp", "--size", "20", "--count", "100",
                     "--out", str(tmp_path / f"{name}.bin")]) == 0
    assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")
    assert len(load_dataset(tmp_path / "a.bin")) == 100


def test_generate_empty_and_jsonl(tmp_path):
    assert main(["generate", "--kind", "kp", "--size", "50", "--count", "0", "--out", str(tmp_path / "e.bin")]) == 0
    assert len(load_dataset(tmp_path / "e.bin")) == 0
    assert main(["generate", "--kind", "cvrp", "--size", "10", "--count", "3", "--out", str(tmp_path / "c.jsonl")]) == 0
    assert len(load_dataset(tmp_path / "c.jsonl", expected_kind="cvrp")) == 3


def test_generate_bad_size_is_config_error(tmp_path):
    assert main(["generate", "--kind", "tsp", "--size", "1", "--count", "3", "--out", str(tmp_path / "x.bin")]) == 2


def test_train_smoke_desk_preset(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"problem": "tsp", "size": 5, "epochs": 1}))
    assert main(["--preset", "desk", "train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 0
    policy, header, _ = load_checkpoint(tmp_path / "r" / "last.ckpt")
    assert header["epoch"] == 0 and policy.config.d_h == 64 and policy.config.n_layers == 3
    assert (tmp_path / "r" / "manifest.json").exists()
    assert len(rows_of(tmp_path / "r" / "train_log.csv")) == 1


def test_train_resume_continues_numbering(trained, tmp_path):
    cfg = json.loads((trained / "cfg.json").read_text())
    cfg["epochs"] = 2
    (tmp_path / "c2.json").write_text(json.dumps(cfg))
    import shutil

    shutil.copytree(trained / "run", tmp_path / "run")
    assert main(["train", "--config", str(tmp_path / "c2.json"), "--out", str(tmp_path / "run"),
                 "--resume", str(tmp_path / "run" / "last.ckpt")]) == 0
    assert [r["epoch"] for r in rows_of(tmp_path / "run" / "train_log.csv")] == ["0", "1"]
    assert (tmp_path / "run" / "epoch_0001.ckpt").exists()


def test_train_invalid_key(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"problem": "tsp", "epocs": 3}))
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == 2
    assert "epocs" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


def test_eval_three_modes_dominance(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "run" / "last.ckpt"), "--dataset", str(trained / "tsp6.bin"),
                 "--modes", "single,multi,aug8", "--out", str(out), "--dump-trajectories"]) == 0
    rows = rows_of(out / "results.csv")
    assert [r["method"] for r in rows] == ["pomo:single", "pomo:multi", "pomo:aug8"]
    per = rows_of(out / "per_instance.csv")
    by_mode = {m: np.array([float(r["best_score"]) for r in per if r["mode"] == m]) for m in ("single", "multi", "aug8")}
    assert np.all(by_mode["aug8"] <= by_mode["multi"]) and np.all(by_mode["multi"] <= by_mode["single"])
    counts = {r["mode"]: int(r["n_candidates"]) for r in per}
    assert counts == {"single": 1, "multi": 6, "aug8": 48}
    assert len(rows_of(out / "per_instance_timing.csv")) == 3 * 40
    lines = (out / "trajectories_aug8.txt").read_text().splitlines()
    assert len(lines) == 40 and lines[0].startswith("0; ")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["checkpoint"].endswith("last.ckpt") and manifest["environment"]["threads"] == 1
    assert bench.RunManifest(**manifest).manifest_id == rows[0]["manifest_id"]


def test_eval_rerun_identical(trained, tmp_path):
    args = ["--seed", "7", "--threads", "1", "eval", "--checkpoint", str(trained / "run" / "last.ckpt"),
            "--dataset", str(trained / "tsp6.bin"), "--modes", "single,multi,aug8,sample:8"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--batch-size", "256"]) == 0
    for name in ("results.csv", "per_instance.csv", "manifest.json"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)


def test_eval_kp_skips_aug8(tmp_path, caplog):
    cfg = {"problem": "kp", "size": 8, "epochs": 1, "instances_per_epoch": 64,
           "model": {"d_h": 16, "n_layers": 1, "n_heads": 4, "d_ff": 32}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 0
    save_dataset(make_dataset("kp", 8, 10, 1), tmp_path / "kp.bin")
    with caplog.at_level(logging.WARNING, logger="pomo"):
        assert main(["eval", "--checkpoint", str(tmp_path / "r" / "last.ckpt"), "--dataset", str(tmp_path / "kp.bin"),
                     "--modes", "multi,aug8", "--out", str(tmp_path / "ev")]) == 0
    assert [r["method"] for r in rows_of(tmp_path / "ev" / "results.csv")] == ["pomo:multi"]
    assert any("aug8" in rec.message for rec in caplog.records)


def test_eval_errors(trained, tmp_path):
    ck = str(trained / "run" / "last.ckpt")
    assert main(["eval", "--checkpoint", ck, "--dataset", str(trained / "tsp6.bin"), "--modes", "beam",
                 "--out", str(tmp_path / "x")]) == 2
    save_dataset(make_dataset("kp", 6, 2, 1), tmp_path / "kp.bin")
    assert main(["eval", "--checkpoint", ck, "--dataset", str(tmp_path / "kp.bin"), "--out", str(tmp_path / "x")]) == 3
    (tmp_path / "bad.bin").write_bytes(b"POMODS1\x00\x01")
    assert main(["eval", "--checkpoint", ck, "--dataset", str(tmp_path / "bad.bin"), "--out", str(tmp_path / "x")]) == 3
    assert main(["eval", "--checkpoint", ck, "--dataset", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "x")]) == 3
    assert main(["--threads", "0", "eval", "--checkpoint", ck, "--dataset", str(trained / "tsp6.bin"),
                 "--out", str(tmp_path / "x")]) == 2


def test_solve_and_report(trained, tmp_path):
    ev, so, rep = tmp_path / "ev", tmp_path / "so", tmp_path / "rep"
    assert main(["eval", "--checkpoint", str(trained / "run" / "last.ckpt"), "--dataset", str(trained / "tsp6.bin"),
                 "--modes", "multi", "--out", str(ev)]) == 0
    assert main(["--threads", "2", "solve", "--dataset", str(trained / "tsp6.bin"), "--out", str(so)]) == 0
    serial = tmp_path / "so1"
    assert main(["solve", "--dataset", str(trained / "tsp6.bin"), "--out", str(serial)]) == 0
    assert rows_of(so / "per_instance.csv") == rows_of(serial / "per_instance.csv")
    assert main(["report", str(ev), str(so / "results.csv"), "--out", str(rep)]) == 0
    rows = {r["method"]: r for r in rows_of(rep / "report.csv")}
    hk = float(rows["held_karp"]["mean_score"])
    multi = float(rows["pomo:multi"]["mean_score"])
    assert float(rows["pomo:multi"]["gap"]) == pytest.approx(100 * (multi - hk) / hk)
    assert rows["pomo:multi"]["oracle"] == "held_karp" and rows["held_karp"]["gap"] == "0.0"
    assert rows["farthest_insertion"]["wall_seconds"] != ""
    assert (rep / "report.png").stat().st_size > 0
    assert "pomo:multi" in (rep / "report.txt").read_text()


def test_report_without_oracle_leaves_gap_empty(trained, tmp_path):
    assert main(["solve", "--dataset", str(trained / "tsp6.bin"), "--solvers", "farthest_insertion",
                 "--out", str(tmp_path / "so")]) == 0
    assert main(["report", str(tmp_path / "so"), "--out", str(tmp_path / "rep")]) == 0
    (row,) = rows_of(tmp_path / "rep" / "report.csv")
    assert row["gap"] == "" and row["oracle"] == ""


def test_report_needs_the_same_dataset(trained, tmp_path):
    other = tmp_path / "other.bin"
    save_dataset(make_dataset("tsp", 6, 40, 99), other)
    assert main(["solve", "--dataset", str(other), "--solvers", "held_karp", "--out", str(tmp_path / "a")]) == 0
    assert main(["solve", "--dataset", str(trained / "tsp6.bin"), "--solvers", "farthest_insertion",
                 "--out", str(tmp_path / "b")]) == 0
    rows, _ = bench.run_report([tmp_path / "a", tmp_path / "b"])
    fi = [r for r in rows if r.method == "farthest_insertion"][0]
    assert fi.gap is None


def test_report_empty_input(tmp_path, capsys):
    assert main(["report"]) == 0
    assert main(["report", "--out", str(tmp_path / "r")]) == 0
    assert rows_of(tmp_path / "r" / "report.csv") == []
    assert not (tmp_path / "r" / "report.png").exists()


def test_gap_conventions():
    assert bench.gap(101.0, 100.0, "tsp") == pytest.approx((1.0, "%"))
    assert bench.gap(99.0, 100.0, "kp") == pytest.approx((1.0, "abs"))
    rows = [
        bench.ResultRow("kp_exact", "kp", 5, 3, 100.0, 1, "h", "m"),
        bench.ResultRow("pomo:multi", "kp", 5, 3, 99.0, 1, "h", "m"),
        bench.ResultRow("cvrp_reference", "cvrp", 5, 3, 100.0, 1, "g", "m"),
        bench.ResultRow("pomo:aug8", "cvrp", 5, 3, 101.0, 1, "g", "m"),
    ]
    out = {r.method: r for r in bench.build_report(rows, oracle=None)}
    assert out["pomo:multi"].gap == pytest.approx(1.0) and out["pomo:multi"].gap_unit == "abs"
    assert out["pomo:aug8"].gap is None  # no exact oracle for cvrp
    out = {r.method: r for r in bench.build_report(rows, oracle="cvrp_reference")}
    assert out["pomo:aug8"].gap == pytest.approx(1.0)


def test_solver_kind_mismatch(trained, tmp_path):
    assert main(["solve", "--dataset", str(trained / "tsp6.bin"), "--solvers", "kp_exact", "--out", str(tmp_path / "x")]) == 2
    assert main(["solve", "--dataset", str(trained / "tsp6.bin"), "--solvers", "concorde", "--out", str(tmp_path / "x")]) == 2


def test_solve_kp_and_cvrp_defaults(tmp_path):
    for kind, m in (("kp", 20), ("cvrp", 10)):
        path = tmp_path / f"{kind}.bin"
        save_dataset(make_dataset(kind, m, 5, 2), path)
        assert main(["solve", "--dataset", str(path), "--out", str(tmp_path / kind)]) == 0
        methods = [r["method"] for r in rows_of(tmp_path / kind / "results.csv")]
        assert methods == list(bench.DEFAULT_SOLVERS[kind])


def test_parse_mode():
    assert bench.parse_mode("sample:16") == ("sample", 16)
    assert bench.parse_mode("aug8") == ("aug8", None)
    for bad in ("sample", "sample:0", "multi:2", "beam"):
        with pytest.raises(Exception):
            bench.parse_mode(bad)
