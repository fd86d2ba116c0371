import csv
import json
import socket
import subprocess
import sys
import time

from eip.cli import main

NOW = "1700000000"


def make_cert(tmp_path, capsys, *extra):
    key = tmp_path / "k.bin"
    assert main(["keygen", "--out", str(key), "--bits", "512", "--seed", "3"]) == 0
    cert = tmp_path / "c.bin"
    rc = main(["cert-make", "--key", str(key), "--loc-src", "192.0.2.1", "--loc-dst", "198.51.100.1",
               "--id-dst", "0200::1", "--now", NOW, "--out", str(cert), *extra])
    assert rc == 0
    id_src = capsys.readouterr().out.strip().splitlines()[-1]
    return cert, id_src


def test_cert_round_trip(tmp_path, capsys):
    cert, id_src = make_cert(tmp_path, capsys)
    assert main(["cert-verify", "--cert", str(cert), "--id-src", id_src, "--now", NOW]) == 0
    assert capsys.readouterr().out.strip() == "accept"
    assert main(["cert-verify", "--cert", str(cert), "--id-src", id_src, "--now", "1800000000"]) == 2
    assert capsys.readouterr().out.strip() == "reject: temporally-invalid"
    assert main(["cert-verify", "--cert", str(cert), "--id-src", "0200::2", "--now", NOW]) == 2
    assert "identifier-mismatch" in capsys.readouterr().out
    assert main(["cert-verify", "--cert", str(cert), "--id-src", id_src, "--own-id", "0200::9", "--now", NOW]) == 2


def test_cert_verify_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x01\x01junk")
    assert main(["cert-verify", "--cert", str(bad), "--id-src", "0200::1"]) == 2
    assert capsys.readouterr().out.startswith("reject: malformed")


def test_input_errors(tmp_path, capsys):
    assert main(["cert-verify", "--cert", str(tmp_path / "missing"), "--id-src", "0200::1"]) == 1
    assert "cannot read" in capsys.readouterr().err
    assert main(["cert-make", "--key", "x", "--loc-src", "nope", "--loc-dst", "1.2.3.4",
                 "--id-dst", "0200::1", "--out", "y"]) == 1
    assert main(["frobnicate"]) == 1
    junk = tmp_path / "key"
    junk.write_bytes(b"\x00")
    assert main(["cert-make", "--key", str(junk), "--loc-src", "1.2.3.4", "--loc-dst", "1.2.3.4",
                 "--id-dst", "0200::1", "--out", str(tmp_path / "c")]) == 1


def test_model_command(tmp_path, capsys):
    assert main(["model", "--preset", "table2-replication", "--out", str(tmp_path)]) == 0
    assert "12.76 Mbps" in capsys.readouterr().out
    rows = list(csv.DictReader((tmp_path / "fig3.csv").open()))
    assert rows[9]["rate"] == "10"
    assert json.loads((tmp_path / "model_meta.json").read_text())["preset"] == "table2-replication"


def test_sim_command(tmp_path, capsys):
    conf = tmp_path / "s.ini"
    conf.write_text("n_reflectors = 10\nn_bots = 2\nkey_bits = 512\nlegit_clients = 3\n")
    rc = main(["sim", "--config", str(conf), "--scenario", "4", "--duration", "5", "--r-a", "2e5",
               "--labels", "--out", str(tmp_path)])
    assert rc == 0
    assert "fp=0 fn=0" in capsys.readouterr().out
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0].startswith("second,")
    assert (tmp_path / "labels.csv").exists()
    assert main(["sim", "--scenario", "4", "--config", str(tmp_path / "none.ini")]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("r_shap = none\n")
    assert main(["sim", "--config", str(bad), "--scenario", "4"]) == 1


def test_puzzle_bench(capsys):
    assert main(["puzzle-bench", "--kbm", "4", "6", "--runs", "20"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("k_bm,runs,mean_trials") and len(lines) == 3


def test_demo_serve_and_send(tmp_path):
    id_file = tmp_path / "id"
    probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    probe.bind(("127.0.0.1", 0))
    port = str(probe.getsockname()[1])
    probe.close()
    serve = subprocess.Popen(
        [sys.executable, "-m", "eip.cli", "demo-serve", "--port", port, "--kbm", "8",
         "--id-file", str(id_file), "--seconds", "8"],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        deadline = time.monotonic() + 5
        while not id_file.exists() and time.monotonic() < deadline:
            time.sleep(0.05)
        time.sleep(0.1)
        out = subprocess.run(
            [sys.executable, "-m", "eip.cli", "demo-send", "--port", port,
             "--server-id", id_file.read_text().strip(), "--payload", "hello"],
            capture_output=True, text=True, timeout=20,
        )
        assert out.returncode == 0, out.stdout + out.stderr
        assert "b'ok:hello'" in out.stdout
    finally:
        serve.terminate()
        serve.wait(timeout=5)
