import csv
import json
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from privcomp import cli, gfmath
from privcomp.model import generate_datasets, random_combination_matrix, write_datasets, write_matrix

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_demo_example(capsys):
    code, out, _ = run(capsys, "demo", "--n", "2", "--k", "2", "--m", "4", "--theta", "3", "--seed", "7")
    assert code == 0
    assert "decode OK, rate 2/3" in out
    assert '"theta"' not in out


def test_demo_three_servers_socket(capsys):
    code, out, _ = run(capsys, "demo", "--n", "3", "--transport", "socket")
    assert code == 0 and "rate 3/4" in out


def test_demo_baseline_mode(capsys):
    code, out, _ = run(capsys, "demo", "--no-compress")
    assert code == 0 and "rate 8/15" in out and "no (gap 2/15)" in out


def test_demo_rejects_m_below_k(capsys):
    code, _, err = run(capsys, "demo", "--m", "1", "--k", "2")
    assert code == 2 and "ConfigError" in err


def test_bad_theta_and_prime(capsys):
    assert run(capsys, "demo", "--theta", "5")[0] == 2
    assert run(capsys, "demo", "--p", "65535")[0] == 2


def test_demo_writes_json(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert run(capsys, "demo", "--seed", "3", "--out", str(out))[0] == 0
    data = json.loads(out.read_text())
    assert data["report"]["match"] and data["transcript"]["D_total"] == 24


def test_demo_grid_outputs(tmp_path, capsys):
    code, out, _ = run(capsys, "demo", "--grid", "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "rates.csv")))
    assert len(rows) == 24 and all(r["match"] == "True" for r in rows)
    assert len(json.loads((tmp_path / "rates.json").read_text())) == 24
    assert (tmp_path / "rates.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 3, "k": 2, "m": 4, "seed": 2}))
    code, out, _ = run(capsys, "demo", "--config", str(cfg))
    assert code == 0 and "rate 3/4" in out
    code, out, _ = run(capsys, "demo", "--config", str(cfg), "--n", "2")
    assert code == 0 and "rate 2/3" in out
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "demo", "--config", str(cfg))[0] == 2
    assert run(capsys, "demo", "--config", str(tmp_path / "missing.json"))[0] == 2


@pytest.mark.parametrize("theta", [1, 2, 3, 4])
def test_table_matches_golden(theta, capsys):
    code, out, _ = run(capsys, "table", "--n", "2", "--m", "4", "--theta", str(theta), "--identity-randomizer")
    assert code == 0
    assert out == (GOLDEN / f"signed_n2_m4_theta{theta}.txt").read_text()


def test_tree_matches_golden(capsys):
    code, out, _ = run(capsys, "table", "--n", "3", "--m", "4", "--theta", "1", "--identity-randomizer")
    assert code == 0 and out == (GOLDEN / "tree_n3_m4_theta1.txt").read_text()


def test_table_requires_identity(capsys):
    code, _, err = run(capsys, "table", "--theta", "1")
    assert code == 2 and "identity" in err


def test_audit_pass_and_mutant(tmp_path, capsys):
    out = tmp_path / "audit.txt"
    code, text, _ = run(capsys, "audit", "--n", "2", "--k", "2", "--m", "2", "--samples", "1000", "--out", str(out))
    assert code == 0 and "[PASS] enumeration" in text
    assert out.read_text().count("[PASS]") == 4
    code, text, _ = run(capsys, "audit", "--n", "2", "--k", "2", "--m", "2", "--samples", "1000", "--mutant")
    assert code == 1 and "[FAIL] sampled" in text


def test_audit_skips_enumeration_over_budget(capsys):
    code, text, _ = run(capsys, "audit", "--n", "2", "--k", "1", "--m", "3", "--samples", "1000")
    assert code == 0 and "[SKIP] enumeration" in text


def _files(tmp_path, N=2, K=2, M=4, seed=11):
    p = gfmath.DEFAULT_P
    V = random_combination_matrix(gfmath.field_context(p), M, K, np.random.default_rng(seed))
    store = generate_datasets(seed, K, N**M, p)
    write_matrix(tmp_path / "V.txt", V.rows)
    write_datasets(tmp_path / "data.txt", store)
    return V, store


def test_serve_and_retrieve_in_threads(tmp_path, capsys):
    _files(tmp_path)
    stops, threads, ports = [], [], []
    for _ in range(2):
        args = cli.build_parser().parse_args(["serve", "--data", str(tmp_path / "data.txt"), "--matrix", str(tmp_path / "V.txt")])
        cfg = cli.resolve(args)
        stop = threading.Event()
        t = threading.Thread(target=cli.cmd_serve, args=(cfg, stop), daemon=True)
        t.start()
        stops.append(stop)
        threads.append(t)
    deadline = time.time() + 10
    while len(ports) < 2 and time.time() < deadline:
        ports += [int(line.rsplit(":", 1)[1]) for line in capsys.readouterr().out.splitlines() if line.startswith("listening")]
        time.sleep(0.05)
    try:
        endpoints = ",".join(f"127.0.0.1:{p}" for p in ports)
        out = tmp_path / "t.json"
        common = ["--matrix", str(tmp_path / "V.txt"), "--data", str(tmp_path / "data.txt")]
        code, text, _ = run(capsys, "retrieve", "--endpoints", endpoints, "--theta", "3", "--out", str(out), *common)
        assert code == 0
        data = json.loads(out.read_text())
        assert data["transcript"]["decode_matches_data"] is True
        assert data["report"]["rate"] == "2/3"
        code, _, err = run(capsys, "retrieve", "--endpoints", endpoints, "--n", "3", *common)
        assert code == 2 and "endpoints" in err
    finally:
        for s in stops:
            s.set()
        for t in threads:
            t.join(5)


def test_serve_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "serve", "--data", str(tmp_path / "nope.txt"))
    assert code == 2 and "FileError" in err


def test_retrieve_unreachable(capsys):
    code, _, err = run(capsys, "retrieve", "--endpoints", "127.0.0.1:1,127.0.0.1:1")
    assert code == 1 and "TransportError" in err


def test_module_entry_point_serves(tmp_path):
    _files(tmp_path)
    proc = subprocess.Popen(
        [sys.executable, "-m", "privcomp", "serve", "--data", str(tmp_path / "data.txt"), "--matrix", str(tmp_path / "V.txt")],
        stdout=subprocess.PIPE,
        text=True,
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("listening on 127.0.0.1:")
        port = int(line.rsplit(":", 1)[1])
        r = subprocess.run(
            [sys.executable, "-m", "privcomp", "retrieve", "--endpoints", f"127.0.0.1:{port},127.0.0.1:{port}", "--matrix", str(tmp_path / "V.txt"), "--data", str(tmp_path / "data.txt"), "--theta", "2"],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert r.returncode == 0, r.stderr
        assert '"decode_matches_data": true' in r.stdout
    finally:
        proc.terminate()
        proc.wait(10)
