import json
import subprocess
import sys

import pytest

from featdrive.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    docs = [json.loads(line) for line in out.splitlines() if line.strip()]
    return code, docs, err


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    assert main(["gen", "--nodes", "3000", "--dim", "32", "--avg-degree", "5", "--seed", "2",
                 "--out", str(d)]) == 0
    return d


def test_gen_validation(capsys, tmp_path):
    code, _, err = run(capsys, "gen", "--nodes", "0", "--out", str(tmp_path))
    assert code == 2 and "error" in err
    code, _, _ = run(capsys, "gen", "--nodes", "10", "--dim", "-3", "--out", str(tmp_path))
    assert code == 2
    code, _, _ = run(capsys, "gen", "--out", str(tmp_path))  # --nodes missing
    assert code == 2


def test_gen_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _, (ma,), _ = run(capsys, "gen", "--nodes", "500", "--dim", "8", "--seed", "9", "--out", str(a))
    _, (mb,), _ = run(capsys, "gen", "--nodes", "500", "--dim", "8", "--seed", "9", "--out", str(b))
    sha = lambda m: {k: v["sha256"] for k, v in m["files"].items()}
    assert sha(ma) == sha(mb)


def test_run_emits_stats(capsys, tiny):
    code, docs, err = run(capsys, "run", "--dataset", str(tiny), "--batch-size", "100",
                          "--fanout", "4,4", "--extractors", "2", "--train-ids", "500",
                          "--epochs", "2", "--verify", "--check")
    assert code == 0
    assert "M_b = 2100, slots = 4200" in err
    assert [d["epoch"] for d in docs] == [0, 1]
    d = docs[0]
    assert d["trained"] == d["batches"] == 5 and d["failed"] == 0 and d["verified"]
    assert d["manifest"]["config"]["batch_size"] == 100
    assert "features.bin" in "".join(d["manifest"]["dataset_sha256"])
    assert len(d["checksums"]) == 5


def test_run_sync_and_workers(capsys, tiny):
    common = ["run", "--dataset", str(tiny), "--batch-size", "100", "--fanout", "4,4",
              "--extractors", "2", "--train-ids", "400"]
    c1, (sync,), _ = run(capsys, *common, "--mode", "sync")
    c2, (asy,), _ = run(capsys, *common, "--placement", "host")
    c3, docs, _ = run(capsys, *common, "--workers", "2")
    assert c1 == c2 == c3 == 0
    assert sync["checksums"] == asy["checksums"]
    assert [d["worker"] for d in docs] == [0, 1]
    assert sum(d["trained"] for d in docs) == 4


def test_run_config_errors(capsys, tiny, tmp_path):
    code, _, err = run(capsys, "run", "--dataset", str(tiny), "--slots", "10")
    assert code == 2 and "slots" in err
    assert run(capsys, "run", "--dataset", str(tmp_path / "missing"))[0] == 2
    assert run(capsys, "run", "--dataset", str(tiny), "--fanout", "3,x")[0] == 2
    assert run(capsys, "run", "--dataset", str(tiny), "--mode", "turbo")[0] == 2


def test_iobench_zero_seconds(capsys, tiny):
    code, (doc,), _ = run(capsys, "iobench", "--file", str(tiny / "features.bin"), "--secs", "0",
                          "--mode", "async:8", "--warm")
    assert code == 0 and doc["mode"] == "async:8" and doc["bandwidth_mb_s"] >= 0
    assert run(capsys, "iobench", "--file", str(tiny / "nope.bin"), "--secs", "0")[0] == 2
    assert run(capsys, "iobench", "--file", str(tiny / "features.bin"), "--block", "100",
               "--secs", "0")[0] == 2


def test_stress_small(capsys):
    code, (doc,), _ = run(capsys, "stress", "--batches", "300", "--extractors", "4", "--nodes", "400",
                          "--max-batch", "50", "--fail-rate", "0.05", "--seed", "1")
    assert code == 0 and doc["ok"] and doc["completed"] + doc["failed_injected"] == 300


def test_entry_point_and_log_level(tiny):
    env = {"FEATDRIVE_LOG": "chatty", "PATH": "/usr/bin:/bin"}
    p = subprocess.run([sys.executable, "-m", "featdrive", "--version"], capture_output=True,
                       text=True, env=env)
    assert p.returncode == 0 and "featdrive" in p.stdout
    p = subprocess.run([sys.executable, "-m", "featdrive", "frobnicate"], capture_output=True, text=True)
    assert p.returncode == 2
