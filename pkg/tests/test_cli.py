from __future__ import annotations

import json
import subprocess
import sys

import pytest

from ectransfer import cli, model


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_plan_min_time(capsys):
    code, out, _ = run_cli(capsys, "plan", "--preset", "nyx", "--loss-rate", "383")
    doc = json.loads(out)
    assert code == 0
    assert doc["parity"] == 2
    assert doc["expected_total_time_s"] == pytest.approx(400.97363839881126, rel=1e-9)
    assert doc["manifest_hash"] == model.manifest_hash(model.nyx_hierarchy())


def test_plan_zero_loss_uses_no_parity(capsys):
    code, out, _ = run_cli(capsys, "plan", "--loss-rate", "0", "--error-bound", "0.0005")
    doc = json.loads(out)
    assert code == 0 and doc["parity"] == 0 and doc["levels"] == 2


def test_plan_min_error(capsys, tmp_path):
    out_path = tmp_path / "plan.json"
    code, _, _ = run_cli(capsys, "plan", "--preset", "nyx", "--mode", "min-error", "--loss-rate", "19",
                         "--deadline", "378.03", "--levels", "4", "--out", str(out_path))
    assert code == 0
    assert json.loads(out_path.read_text())["parity"] == [5, 4, 2, 0]


def test_plan_infeasible_deadline(capsys):
    code, _, err = run_cli(capsys, "plan", "--mode", "min-error", "--deadline", "0.001")
    assert code == 2
    assert "feasibility bound" in err


def test_unsatisfiable_bound(capsys):
    code, _, _ = run_cli(capsys, "plan", "--error-bound", "1e-12")
    assert code == 2


@pytest.mark.parametrize(
    "argv",
    [
        ["plan", "--mode", "nope"],
        ["plan", "--mode", "min-error"],
        ["plan", "--latency", "-1"],
        ["plan", "--levels", "9"],
        ["simulate"],
        ["send", "--error-bound", "0.1", "--deadline", "3"],
        ["frobnicate"],
    ],
)
def test_config_errors(capsys, argv):
    assert run_cli(capsys, *argv)[0] == 4


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"loss-rate": 957, "preset": "nyx"}))
    code, out, _ = run_cli(capsys, "plan", "--config", str(cfg))
    assert code == 0 and json.loads(out)["parity"] == 4
    # explicit flags win over the file
    code, out, _ = run_cli(capsys, "plan", "--config", str(cfg), "--loss-rate", "19")
    assert json.loads(out)["parity"] == 0
    cfg.write_text(json.dumps({"los-rate": 1}))
    assert run_cli(capsys, "plan", "--config", str(cfg))[0] == 4
    cfg.write_text("[1]")
    assert run_cli(capsys, "plan", "--config", str(cfg))[0] == 4


def test_gen_data_is_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(capsys, "gen-data", "--sizes", "1000", "5000", "--error-bounds", "0.1", "0.01",
                   "--seed", "3", "--out", str(a))[0] == 0
    assert run_cli(capsys, "gen-data", "--sizes", "1000", "5000", "--error-bounds", "0.1", "0.01",
                   "--seed", "3", "--out", str(b))[0] == 0
    assert (a / "level2.bin").read_bytes() == (b / "level2.bin").read_bytes()
    h = model.read_manifest(a / "manifest.json")
    assert h.sizes == [1000, 5000]
    assert model.level_bytes(h, 1, a) == (a / "level1.bin").read_bytes()
    assert run_cli(capsys, "gen-data", "--sizes", "10", "--out", str(a))[0] == 4


def _scenario(tmp_path, **extra):
    doc = {
        "schema_version": 1,
        "name": "tiny",
        "hierarchy": {"manifest_version": 1, "levels": [
            {"index": 1, "size_bytes": 200000, "error_bound": 0.01},
            {"index": 2, "size_bytes": 400000, "error_bound": 0.001}]},
        "losses": [{"kind": "static", "rate": 383}],
        "protocols": [{"kind": "udp-static-ec", "parity": [2]}, {"kind": "tcp-baseline"}],
        "seed": 10,
    }
    doc.update(extra)
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(doc))
    return path


def test_simulate_rows_and_determinism(capsys, tmp_path):
    sc = _scenario(tmp_path)
    code, out, _ = run_cli(capsys, "simulate", "--scenario", str(sc), "--seeds", "3")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 1 + 2 * 3
    assert "tiny#0" in lines[1] and "static(383)" in lines[1]
    again = run_cli(capsys, "simulate", "--scenario", str(sc), "--seeds", "3", "--jobs", "2")[1]
    assert again == out
    code, out, _ = run_cli(capsys, "simulate", "--scenario", str(sc), "--format", "json", "--base-seed", "4")
    rows = json.loads(out)
    assert [r["seed"] for r in rows] == [4, 4]


def test_simulate_rejects_bad_scenario(capsys, tmp_path):
    sc = _scenario(tmp_path, extra_key=1)
    assert run_cli(capsys, "simulate", "--scenario", str(sc))[0] == 4


@pytest.mark.slow
def test_send_recv_subprocess(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--sizes", "150000", "300000", "--error-bounds", "0.01", "0.001",
                     "--seed", "5", "--out", str(data)]) == 0
    capsys.readouterr()
    out_dir = tmp_path / "recv"
    recv = subprocess.Popen(
        [sys.executable, "-m", "ectransfer", "recv", "--port", "0", "--window", "0.1", "--ftg-timeout", "0.2",
         "--output-dir", str(out_dir), "--report", str(tmp_path / "rx.json")],
        stderr=subprocess.PIPE, text=True,
    )
    try:
        line = recv.stderr.readline()
        port = line.strip().rsplit(":", 1)[1]
        send = subprocess.run(
            [sys.executable, "-m", "ectransfer", "send", "--manifest", str(data / "manifest.json"),
             "--port", port, "--error-bound", "0.001", "--rate-limit", "8000", "--measured-ec-rate", "1e9",
             "--latency", "0.001", "--loss-rate", "160", "--shim", "every:40", "--ftg-timeout", "0.2",
             "--report", str(tmp_path / "tx.json")],
            capture_output=True, text=True, timeout=120,
        )
        assert recv.wait(timeout=60) == 0
    finally:
        if recv.poll() is None:
            recv.kill()
    assert send.returncode == 0, send.stderr
    tx = json.loads((tmp_path / "tx.json").read_text())
    assert tx["checksums_ok"] and tx["levels_intact"] == 2
    assert (out_dir / "level2.bin").read_bytes() == (data / "level2.bin").read_bytes()

    # nothing listens any more: the sender aborts with code 3
    refused = subprocess.run(
        [sys.executable, "-m", "ectransfer", "send", "--port", port, "--error-bound", "0.004",
         "--rate-limit", "8000", "--measured-ec-rate", "1e9"],
        capture_output=True, text=True, timeout=60,
    )
    assert refused.returncode == 3
