import json
import subprocess
import sys
import xml.etree.ElementTree as ET


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "dietattn", *args],
                          capture_output=True, text=True, cwd=cwd)


def test_verify_passes(tmp_path):
    out = tmp_path / "v"
    r = run_cli("verify", "--n", "12", "--d", "8", "--heads", "2",
                "--d-p", "3", "--trials", "15", "--seed", "1",
                "--out", str(out))
    assert r.returncode == 0, r.stderr
    passes = [l for l in r.stdout.splitlines() if l.startswith("PASS ")]
    assert len(passes) >= 4
    assert any("theorem1" in l and "witness_rank=" in l for l in passes)
    report = json.loads((out / "verify_report.json").read_text())
    assert report["all_passed"] is True
    assert set(report["suites"]) >= {"theorem1", "theorem2",
                                     "zero-param-equivalence",
                                     "finite-difference"}
    meta = json.loads((out / "verify_report.json.meta.json").read_text())
    assert meta["command"] == "verify"
    assert meta["run_config"]["n"] == 12
    assert meta["created_unix"] > 0


def test_verify_injected_error_fails(tmp_path):
    out = tmp_path / "vi"
    r = run_cli("verify", "--n", "12", "--d", "8", "--heads", "2",
                "--d-p", "3", "--trials", "5", "--inject-grad-error",
                "--out", str(out))
    assert r.returncode == 1
    assert "FAIL fd-injected-error" in r.stdout
    assert "fd-injected-error" in r.stderr
    report = json.loads((out / "verify_report.json").read_text())
    assert report["all_passed"] is False


def test_inject_flag_is_hidden():
    r = run_cli("verify", "--help")
    assert r.returncode == 0
    assert "inject-grad-error" not in r.stdout


TRAIN_ARGS = ("train", "--task", "position-probe", "--scheme", "diet-rel",
              "--n", "8", "--d", "16", "--heads", "2", "--layers", "1",
              "--steps", "300", "--lr", "3e-3", "--seed", "4")


def test_train_learns_and_is_byte_deterministic(tmp_path):
    o1, o2 = tmp_path / "a", tmp_path / "b"
    r1 = run_cli(*TRAIN_ARGS, "--out", str(o1))
    r2 = run_cli(*TRAIN_ARGS, "--out", str(o2))
    assert r1.returncode == 0, r1.stderr
    assert r2.returncode == 0
    h1 = (o1 / "train_history.csv").read_bytes()
    h2 = (o2 / "train_history.csv").read_bytes()
    assert h1 == h2
    c1 = (o1 / "checkpoint.zip").read_bytes()
    c2 = (o2 / "checkpoint.zip").read_bytes()
    assert c1 == c2
    meta = json.loads((o1 / "checkpoint.zip.meta.json").read_text())
    assert meta["final_accuracy"] > 0.9

    o3 = tmp_path / "c"
    r3 = run_cli(*TRAIN_ARGS[:-1], "5", "--out", str(o3))
    assert r3.returncode == 0
    assert (o3 / "checkpoint.zip").read_bytes() != c1


def test_train_without_positions_stays_at_chance(tmp_path):
    out = tmp_path / "n"
    r = run_cli("train", "--task", "position-probe", "--scheme", "none",
                "--n", "8", "--d", "16", "--heads", "2", "--layers", "1",
                "--steps", "150", "--seed", "4", "--out", str(out))
    assert r.returncode == 0, r.stderr
    meta = json.loads((out / "train_history.csv.meta.json").read_text())
    # chance on an 8-class probe is 0.125
    assert meta["final_accuracy"] < 0.35


def test_viz_untrained(tmp_path):
    out = tmp_path / "z"
    r = run_cli("viz", "--scheme", "diet-abs", "--d-p", "3", "--n", "8",
                "--d", "8", "--heads", "2", "--layers", "1",
                "--out", str(out))
    assert r.returncode == 0, r.stderr
    for name in ("bias_l0h0.svg", "bias_l0h1.svg", "probs_l0h0.svg",
                 "probs_l0h1.svg", "rank_report.json", "rank_report.csv",
                 "cosine_stats.json"):
        assert (out / name).exists(), name
        assert (out / (name + ".meta.json")).exists(), name
    root = ET.parse(out / "bias_l0h0.svg").getroot()
    assert root.get("data-rows") == "8"
    assert root.get("data-cmap") == "heat"
    report = json.loads((out / "rank_report.json").read_text())
    assert len(report["rows"]) == 2
    assert "rel_tol" in r.stdout


def test_viz_untrained_scalar_bias_is_flat(tmp_path):
    out = tmp_path / "zr"
    r = run_cli("viz", "--scheme", "diet-rel", "--n", "6", "--d", "8",
                "--heads", "1", "--layers", "1", "--out", str(out))
    assert r.returncode == 0, r.stderr
    root = ET.parse(out / "bias_l0h0.svg").getroot()
    # zero-initialized relative table: every cell identical
    assert float(root.get("data-vmin")) == 0.0
    assert float(root.get("data-vmax")) == 0.0
    assert not (out / "cosine_stats.json").exists()


def test_viz_from_checkpoint(tmp_path):
    train_out = tmp_path / "t"
    assert run_cli(*TRAIN_ARGS, "--out", str(train_out)).returncode == 0
    out = tmp_path / "z"
    r = run_cli("viz", "--checkpoint", str(train_out / "checkpoint.zip"),
                "--out", str(out), "--seed", "4")
    assert r.returncode == 0, r.stderr
    report = json.loads((out / "rank_report.json").read_text())
    assert report["context"]["config"]["scheme"]["kind"] == "diet_rel"
    # trained relative bias is no longer flat
    root = ET.parse(out / "bias_l0h0.svg").getroot()
    assert float(root.get("data-vmax")) > float(root.get("data-vmin"))


def test_viz_missing_checkpoint(tmp_path):
    r = run_cli("viz", "--checkpoint", str(tmp_path / "nope.zip"),
                "--out", str(tmp_path / "o"))
    assert r.returncode == 1
    assert "error:" in r.stderr
    assert "checkpoint not found" in r.stderr


def test_rank_scan_command(tmp_path):
    out = tmp_path / "rs"
    r = run_cli("rank-scan", "--scheme", "diet-abs", "--d-p", "2",
                "--n", "10", "--d", "8", "--heads", "2", "--layers", "1",
                "--batches", "2", "--out", str(out))
    assert r.returncode == 0, r.stderr
    assert (out / "rank_scan.json").exists()
    assert (out / "rank_scan.csv").exists()
    assert (out / "rank_scan.json.meta.json").exists()
    lines = [l for l in r.stdout.splitlines() if l.startswith("layer ")]
    assert len(lines) == 2
    assert all("rel_tol=" in l for l in lines)


def test_bench_command(tmp_path):
    out = tmp_path / "bb"
    r = run_cli("bench", "--n", "16", "--d", "16", "--heads", "2",
                "--layers", "1", "--reps", "10", "--warmup", "3",
                "--out", str(out))
    assert r.returncode == 0, r.stderr
    csv_lines = (out / "bench_compare.csv").read_text().strip().splitlines()
    assert csv_lines[0] == ("scheme,mode,n,d,h,d_h,reps,mean_ns,stdev_ns,"
                            "min_ns,rel_slowdown")
    assert len(csv_lines) == 17
    assert (out / "bench_compare.json.meta.json").exists()
    assert "input-add" in r.stdout


def test_config_file_merge(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"steps": 30, "scheme": "diet-rel",
                               "n": 8, "d": 16, "heads": 2, "layers": 1,
                               "task": "position-probe"}))
    out = tmp_path / "m"
    r = run_cli("train", "--config", str(cfg), "--steps", "25",
                "--out", str(out))
    assert r.returncode == 0, r.stderr
    meta = json.loads((out / "train_history.csv.meta.json").read_text())
    assert meta["run_config"]["steps"] == 25      # flag wins
    assert meta["run_config"]["scheme"] == "diet-rel"
    assert meta["run_config"]["n"] == 8


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"stepz": 30}))
    r = run_cli("train", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert r.returncode == 1
    assert "error:" in r.stderr and "stepz" in r.stderr


def test_requires_subcommand():
    r = run_cli()
    assert r.returncode == 2
