import json

import pytest

from xdesc.cli import REPORT_SCHEMA, read_report, run
from xdesc.errors import FormatError


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["gen", "--n", "640", "--seed", "1", "--out", str(d / "train")]) == 0
    assert run(["gen", "--n", "200", "--seed", "2", "--out", str(d / "test")]) == 0
    assert run(["train-bank", "--data", str(d / "train/manifest.json"), "--epochs", "1",
                "--embed-dim", "16", "--out", str(d / "bank.xbnk")]) == 0
    return d


def test_gen_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert run(["gen", "--n", "100", "--seed", "1", "--out", str(tmp_path / sub)]) == 0
    for name in ("manifest.json", "brief.xdsc", "sift.xdsc", "hardnet.xdsc", "sosnet.xdsc"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run(["gen", "--n", "100", "--seed", "2", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c/sift.xdsc").read_bytes() != (tmp_path / "a/sift.xdsc").read_bytes()


def test_usage_errors_exit_2(capsys):
    assert run([]) == 2
    assert run(["gen"]) == 2
    assert run(["gen", "--out", "x", "--bogus"]) == 2
    assert run(["match", "--a", "x", "--b", "y", "--ratio", "1.5"]) == 2


def test_runtime_errors_exit_1(workdir, tmp_path, capsys):
    assert run(["eval", "--data", str(tmp_path / "missing.json")]) == 1
    assert "xdesc eval: error" in capsys.readouterr().err
    (tmp_path / "bad.xbnk").write_bytes(b"garbage")
    assert run(["encode", "--bank", str(tmp_path / "bad.xbnk"), "--in", str(workdir / "test/sift.xdsc"),
                "--out", str(tmp_path / "e.xdsc")]) == 1
    assert "XBNK" in capsys.readouterr().err


def test_naive_match_on_incompatible_dims(workdir, capsys):
    code = run(["match", "--a", str(workdir / "test/brief.xdsc"), "--b", str(workdir / "test/sift.xdsc"),
                "--mode", "naive"])
    assert code == 1
    assert "incompatible descriptor dimensions" in capsys.readouterr().err


def test_report_schema(workdir, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert run(["eval", "--data", str(workdir / "test/manifest.json"), "--bank", str(workdir / "bank.xbnk"),
                "--report", str(report)]) == 0
    data = read_report(report)
    assert data["schema_version"] == REPORT_SCHEMA
    assert data["command"] == "eval"
    assert data["config"]["ratio"] == 0.9 and data["config"]["seed"] == 0
    assert set(data["metrics"]) >= {"recall", "worst_cross", "mean_cross"}
    assert "total_s" in data["timings"]
    printed = json.loads(capsys.readouterr().out)
    assert printed == data["metrics"]
    data["schema_version"] = "xdesc.report/99"
    report.write_text(json.dumps(data))
    with pytest.raises(FormatError):
        read_report(report)


def test_translate_and_match_modes(workdir, tmp_path):
    t = workdir / "test"
    assert run(["train-pair", "--data", str(workdir / "train/manifest.json"), "--src", "hardnet",
                "--dst", "brief", "--epochs", "1", "--out", str(tmp_path / "p.xmlp")]) == 0
    assert run(["translate", "--model", str(tmp_path / "p.xmlp"), "--in", str(t / "hardnet.xdsc"),
                "--out", str(tmp_path / "tr.xdsc")]) == 0
    assert (tmp_path / "tr.xdsc").read_text().startswith("xdsc 1 brief 512 binary hamming none 200")
    assert run(["match", "--a", str(t / "hardnet.xdsc"), "--b", str(t / "brief.xdsc"), "--mode", "translate",
                "--model", str(tmp_path / "p.xmlp"), "--out", str(tmp_path / "m.tsv")]) == 0
    assert (tmp_path / "m.tsv").read_text().startswith("index_a\tindex_b\tdistance")
    assert run(["encode", "--bank", str(workdir / "bank.xbnk"), "--in", str(t / "sift.xdsc"),
                "--out", str(tmp_path / "e.xdsc"), "--binary"]) == 0
    assert run(["match", "--a", str(t / "sift.xdsc"), "--b", str(t / "brief.xdsc"), "--mode", "embed",
                "--bank", str(workdir / "bank.xbnk")]) == 0


def test_end_to_end_scenario(workdir, tmp_path):
    views = tmp_path / "views"
    assert run(["gen", "--n", "60", "--views", "8", "--seed", "3", "--out", str(views)]) == 0
    stats = tmp_path / "stats.json"
    assert run(["scenario", "--manifest", str(views / "images.json"), "--bank", str(workdir / "bank.xbnk"),
                "--stats-out", str(stats), "--threads", "2"]) == 0
    data = json.loads(stats.read_text())
    assert sum(data["histogram"].values()) == pytest.approx(100, abs=1e-6)
    assert data["n_tracks"] > 0
    assert run(["scenario", "--manifest", str(views / "images.json"), "--strategy", "naive"]) == 0
