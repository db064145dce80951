import json
import subprocess
import sys

import pytest

from coevo.cli import main

FAST = {"episode": {"max_steps": 50, "contact_penalty": 0.1, "energy_coeff": 0.001}, "checkpoint_every": 2}


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.json"
    path.write_text(json.dumps(FAST))
    return path


@pytest.fixture
def run_dir(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(capsys, "run", "--bauplan", "chain7", "--seed", "4", "--replications", "2",
                              "--budget", "4000", "--out", str(out), "--config", str(fast_config))
    assert code == 0
    assert json.loads(stdout)["replications"] == [4, 5]
    return out


def test_run_writes_tables(run_dir):
    for s in (4, 5):
        d = run_dir / f"seed_{s}"
        assert (d / "generations.csv").exists() and (d / "checkpoint.npz").exists()
    doc = json.loads((run_dir / "manifest.json").read_text())
    assert doc["config"]["episode"]["max_steps"] == 50
    assert set(doc["replications"]) == {"4", "5"}


def test_resume_completed_run_is_stable(run_dir, capsys):
    before = (run_dir / "seed_4" / "generations.csv").read_bytes()
    code, out, _ = run_cli(capsys, "resume", "--out", str(run_dir))
    assert code == 0 and json.loads(out)["replications"] == [4, 5]
    assert (run_dir / "seed_4" / "generations.csv").read_bytes() == before


def test_posteval(run_dir, capsys):
    code, out, _ = run_cli(capsys, "posteval", "--source", str(run_dir / "seed_4" / "checkpoint.npz"),
                           "--episodes", "2")
    rec = json.loads(out)
    assert code == 0 and rec["bauplan"] == "chain7" and len(rec["fitness"]) == 2
    assert all(t in ("completed", "overspeed", "diverged") for t in rec["termination"])


def test_drift(run_dir, capsys):
    (run_dir / "seed_4" / "drift.csv").unlink()
    code, out, _ = run_cli(capsys, "drift", "--out", str(run_dir))
    assert code == 0 and set(json.loads(out)["drift_points"]) == {"seed_4", "seed_5"}
    assert (run_dir / "seed_4" / "drift.csv").read_text().startswith("env_steps,control_drift,morph_drift")


def test_stats(run_dir, tmp_path, fast_config, capsys):
    other = tmp_path / "fixed"
    assert run_cli(capsys, "run", "--bauplan", "chain7", "--condition", "fixed", "--seed", "4",
                   "--replications", "2", "--budget", "4000", "--out", str(other),
                   "--config", str(fast_config))[0] == 0
    report = tmp_path / "report.json"
    code, out, _ = run_cli(capsys, "stats", str(run_dir), str(other), "--out", str(report))
    assert code == 0
    doc = json.loads(report.read_text())
    (cmp,) = doc["comparisons"]
    assert {cmp["a"], cmp["b"]} == {"chain7/coevolve", "chain7/fixed"}
    assert 0.0 <= cmp["p"] <= 1.0 and cmp["p_bonferroni"] == min(1.0, cmp["p"])


def test_export(run_dir, tmp_path, capsys):
    path = tmp_path / "traj.jsonl"
    code, out, _ = run_cli(capsys, "export", "--source", str(run_dir / "seed_5" / "checkpoint.npz"),
                           "--seed", "1", "--out", str(path))
    frames = json.loads(out)["frames"]
    assert code == 0 and frames == len(path.read_text().splitlines()) == 50


def test_preevolved_from_source(run_dir, tmp_path, fast_config, capsys):
    out = tmp_path / "pre"
    code, _, _ = run_cli(capsys, "run", "--bauplan", "chain7", "--condition", "preevolved", "--source",
                         str(run_dir / "seed_4" / "checkpoint.npz"), "--replications", "1", "--budget", "2000",
                         "--out", str(out), "--config", str(fast_config))
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["condition"] == "preevolved"


def test_usage_error_is_json(capsys):
    code, out, err = run_cli(capsys, "run", "--bauplan", "hopper", "--out", "x")
    assert code == 2 and out == ""
    assert json.loads(err)["error"] == "usage"


def test_runtime_error_is_json(tmp_path, capsys):
    code, _, err = run_cli(capsys, "posteval", "--source", str(tmp_path / "missing.npz"))
    rec = json.loads(err)
    assert code == 1 and rec["error"] == "CheckpointError" and "missing.npz" in rec["message"]


def test_kind_mismatch_reported(run_dir, tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--bauplan", "chain13", "--condition", "preevolved", "--source",
                           str(run_dir / "seed_4" / "checkpoint.npz"), "--out", str(tmp_path / "x"))
    assert code == 1 and json.loads(err)["error"] == "HarnessError"


def test_workers_env(monkeypatch, tmp_path, fast_config, capsys):
    monkeypatch.setenv("COEVO_WORKERS", "2")
    out = tmp_path / "w"
    assert run_cli(capsys, "run", "--bauplan", "chain7", "--replications", "1", "--budget", "2000",
                   "--out", str(out), "--config", str(fast_config))[0] == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["workers"] == 2
    monkeypatch.setenv("COEVO_WORKERS", "zero")
    code, _, err = run_cli(capsys, "run", "--out", str(tmp_path / "y"))
    assert code == 2 and "COEVO_WORKERS" in json.loads(err)["message"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "coevo.cli", "drift", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["error"] == "HarnessError"
