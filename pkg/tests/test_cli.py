import json
import shutil
import socket
import threading

import numpy as np
import pytest

from ssvep_cstl.cli import input_hashes, main, read_run_manifest, sha256_file, write_run_manifest
from ssvep_cstl.fuzzy import load_model
from ssvep_cstl.signal_core import load_manifest, read_epoch_file


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--seed", "2", "--out", str(out), "--freqs", "8", "10", "12", "14",
                 "--trials", "3", "--duration", "2", "--channels", "2"]) == 0
    return out / "manifest.json"


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def err_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")
    return lines[0]


def test_help_exits_zero(capsys):
    assert main(["evaluate", "--help"]) == 0
    assert "usage:" in capsys.readouterr().out


def test_unknown_config_key(tmp_path, data, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"repeats": 1, "colour": "red"}))
    assert main(["evaluate", "--seed", "1", "--manifest", str(data), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == 2
    assert "colour" in err_line(capsys)


def test_unknown_flag_and_missing_inputs(tmp_path, data, capsys):
    assert main(["evaluate", "--seed", "1", "--bogus"]) == 2
    err_line(capsys)
    assert main(["evaluate", "--manifest", str(data), "--out", str(tmp_path)]) == 2
    assert "--seed" in err_line(capsys)
    assert main(["evaluate", "--seed", "1", "--out", str(tmp_path)]) == 2
    assert "--manifest" in err_line(capsys)
    assert main(["evaluate", "--seed", "1", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    err_line(capsys)


def test_runtime_failure_exits_one(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text("{not json")
    assert main(["preprocess", "--manifest", str(bad), "--out", str(tmp_path / "o")]) == 1
    err_line(capsys)


def test_config_merge_flags_win(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"baseline": {"repeats": 3, "method": "cca"}, "n-source": 2}))
    out = tmp_path / "o"
    assert main(["baseline", "--seed", "4", "--manifest", str(data), "--out", str(out), "--config", str(cfg),
                 "--repeats", "2"]) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["repeats"] == 2 and resolved["method"] == "cca" and resolved["n_source"] == 2
    # the echoed config is itself a valid config file
    out2 = tmp_path / "o2"
    assert main(["baseline", "--config", str(out / "config.json"), "--out", str(out2)]) == 0
    assert (out / "trials.csv").read_bytes() == (out2 / "trials.csv").read_bytes()


def test_evaluate_is_byte_reproducible(tmp_path, data):
    args = ["--seed", "9", "--manifest", str(data), "--method", "fuzzy", "--n-source", "2", "--repeats", "2",
            "--epochs", "5", "--rules", "3", "--stride-s", "0.25"]
    out = tmp_path / "a"
    assert main(["evaluate", *args, "--out", str(out)]) == 0
    # report.json carries measured latencies; everything else must be byte-stable
    first = {k: v for k, v in tree_bytes(out).items() if k != "report.json"}
    assert main(["evaluate", *args, "--out", str(out)]) == 0
    assert {k: v for k, v in tree_bytes(out).items() if k != "report.json"} == first
    assert {"trials.csv", "summary.csv", "config.json", "run_manifest.json"} <= set(first)
    doc = read_run_manifest(out / "run_manifest.json")
    assert doc["config"]["seed"] == 9 and str(data) in doc["inputs"]


def test_generate_is_reproducible(tmp_path):
    argv = ["generate", "--seed", "3", "--out", str(tmp_path), "--trials", "2", "--freqs", "9", "11"]
    assert main(argv) == 0
    first = tree_bytes(tmp_path)
    assert main(argv) == 0
    assert tree_bytes(tmp_path) == first


def test_run_manifest_hashes(tmp_path):
    f = tmp_path / "in.bin"
    f.write_bytes(b"abc")
    g = tmp_path / "copy.bin"
    shutil.copy(f, g)
    assert sha256_file(f) == sha256_file(g)
    p = write_run_manifest(tmp_path / "o", {"k": 1}, "9.9", input_hashes([f]), "x")
    doc = read_run_manifest(p)
    assert doc["version"] == "9.9" and doc["config"] == {"k": 1}
    f.write_bytes(b"abd")
    assert input_hashes([f])[str(f)] != doc["inputs"][str(f)]
    (tmp_path / "junk.json").write_text("{}")
    with pytest.raises(ValueError):
        read_run_manifest(tmp_path / "junk.json")


def test_commands_do_not_mutate_inputs(tmp_path, data):
    before = tree_bytes(data.parent)
    assert main(["preprocess", "--manifest", str(data), "--out", str(tmp_path / "pre")]) == 0
    assert main(["emd", "--manifest", str(data), "--out", str(tmp_path / "emd")]) == 0
    assert main(["reconstruct", "--manifest", str(data), "--source-classes", "0", "1",
                 "--out", str(tmp_path / "rec")]) == 0
    assert tree_bytes(data.parent) == before

    pre = load_manifest(tmp_path / "pre" / "manifest.json")
    assert pre.trials[0][0].n_samples == 500 - 35
    rec = load_manifest(tmp_path / "rec" / "manifest.json")
    assert sorted(rec.trials) == [2, 3] and len(rec.trials[2]) == 6
    imf = read_epoch_file(next((tmp_path / "emd" / "imfs").glob("t00000_k01.epo")))
    assert imf.trial_id == 1
    rows = (tmp_path / "emd" / "imfs.csv").read_text().splitlines()
    assert rows[0] == "trial_id,class,channel,k,dominant_hz,rms" and len(rows) > 1


def test_train_outputs(tmp_path, data):
    out = tmp_path / "t"
    assert main(["train", "--seed", "1", "--manifest", str(data), "--out", str(out), "--epochs", "3",
                 "--rules", "3", "--source-classes", "0", "2"]) == 0
    m = load_model(out / "model.fzm")
    assert m.n_rules == 3 and m.n_classes == 4
    assert len((out / "loss.csv").read_text().splitlines()) == 4
    assert (out / "centers.csv").read_text().startswith("rule,")
    assert main(["train", "--seed", "1", "--manifest", str(data), "--out", str(tmp_path / "t2"), "--epochs", "2"]) == 0


def test_ttest_command(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("0.8 0.7 0.9 0.85\n")
    b.write_text("0.75,0.7,0.8,0.8\n")
    assert main(["ttest", "--a", str(a), "--b", str(b), "--out", str(tmp_path / "o")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 4 and 0 <= res["p"] <= 1
    b.write_text("1 2\n")
    assert main(["ttest", "--a", str(a), "--b", str(b)]) == 2


def free_port(kind=socket.SOCK_STREAM):
    with socket.socket(socket.AF_INET, kind) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_stream_serve_listen(tmp_path, capsys):
    data = tmp_path / "on"
    assert main(["generate", "--seed", "3", "--out", str(data), "--freqs", "7", "7.5", "8", "8.5", "9", "11",
                 "--fs", "500", "--duration", "2", "--trials", "2"]) == 0
    manifest = str(data / "manifest.json")
    assert main(["train", "--seed", "3", "--manifest", manifest, "--out", str(tmp_path / "t"), "--epochs", "20",
                 "--window-s", "1.5", "--source-classes", "0", "2", "4"]) == 0
    tcp, udp = free_port(), free_port(socket.SOCK_DGRAM)
    codes = {}
    serve = threading.Thread(target=lambda: codes.update(serve=main(
        ["serve", "--model", str(tmp_path / "t" / "model.fzm"), "--endpoint", f"127.0.0.1:{tcp}",
         "--feedback", f"127.0.0.1:{udp}", "--out", str(tmp_path / "sv")])))
    listen = threading.Thread(target=lambda: codes.update(listen=main(
        ["listen", "--endpoint", f"127.0.0.1:{udp}", "--manifest", manifest, "--timeout", "10",
         "--out", str(tmp_path / "ls")])))
    serve.start()
    listen.start()
    codes["stream"] = main(["stream", "--manifest", manifest, "--endpoint", f"127.0.0.1:{tcp}", "--fs", "500"])
    serve.join(60)
    listen.join(60)
    assert codes == {"serve": 0, "listen": 0, "stream": 0}
    res = json.loads((tmp_path / "ls" / "listen.json").read_text())
    assert res["missed"] == [] and len(res["received"]) == 12
    rows = (tmp_path / "sv" / "online.csv").read_text().splitlines()
    assert len(rows) == 13
