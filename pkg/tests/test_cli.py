import sys
import os
import json
import pytest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from cli import main

FAST_CONFIG = {"nlpca": {"epochs": 50, "inversion_steps": 30, "inversion_method": "gauss-newton"},
               "inference": {"max_outer": 5}}


def run_pipeline(workdir):
    config = workdir / "config.json"
    config.write_text(json.dumps(FAST_CONFIG), encoding="utf-8")
    common = ["--config", str(config), "--no-timing"]
    data, part, model = workdir / "data", workdir / "partition.csv", workdir / "model.json"
    steps = [
        ["gen-data", "--buses", "4", "--hours", "24", "--seed", "1", "--out", str(data)],
        ["partition", "--topology", str(data / "topology.csv"), "--depth", "1", "--out", str(part)],
        ["build", "--partition", str(part), "--dataset", str(data), "--out", str(model)],
        ["train", "--model", str(model), "--dataset", str(data), "--em-iters", "1"],
        ["impute", "--model", str(model), "--dataset", str(data), "--missing-ratio", "0.2",
         "--out", str(workdir / "estimates.csv")],
        ["detect", "--model", str(model), "--dataset", str(data), "--out", str(workdir / "detection.csv")],
    ]
    for step in steps:
        assert main(common + step) == 0, step
    return ["estimates.csv", "detection.csv", "model.json", "model.train.json", "partition.csv"]


def test_pipeline_is_byte_reproducible(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    second.mkdir()
    outputs = run_pipeline(first)
    run_pipeline(second)
    for name in outputs:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    header = (first / "estimates.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "hour,bus,kind,estimate,std,observed"
    report = json.loads((first / "model.train.json").read_text(encoding="utf-8"))
    assert "timing" not in report
    assert len(report["iterations"]) == 2


def test_detect_calibrates_on_the_leading_hours(tmp_path, capsys):
    run_pipeline(tmp_path)
    capsys.readouterr()
    assert main(["--config", str(tmp_path / "config.json"), "detect", "--model", str(tmp_path / "model.json"),
                 "--dataset", str(tmp_path / "data"), "--train-end", "12",
                 "--out", str(tmp_path / "calibrated.csv")]) == 0
    document = json.loads(capsys.readouterr().out)
    assert document["calibrated"] is True
    header = (tmp_path / "calibrated.csv").read_text(encoding="utf-8").splitlines()[0].split(",")
    assert "bias" in header
    assert document["sensors"] == len((tmp_path / "calibrated.csv").read_text(encoding="utf-8").splitlines()) - 1


def test_build_reports_a_valid_graph(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--buses", "6", "--hours", "24", "--out", str(data)]) == 0
    assert main(["partition", "--topology", str(data / "topology.csv"), "--depth", "1",
                 "--out", str(tmp_path / "p.csv")]) == 0
    capsys.readouterr()
    assert main(["build", "--partition", str(tmp_path / "p.csv"), "--dataset", str(data),
                 "--out", str(tmp_path / "g.json")]) == 0
    document = json.loads(capsys.readouterr().out)
    assert document["valid"] is True
    assert document["variables"] >= 2
    assert document["joints"] >= 1


def test_version_and_help_exit_zero(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("gridbp ")
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert main(["gen-data", "--buses", "4"]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["--threads", "0", "gen-data", "--buses", "4", "--hours", "24", "--out", "x"]) == 1
    assert main(["no-such-command"]) == 1


@pytest.mark.parametrize("args", [
    ["train", "--model", "missing.json", "--dataset", "missing"],
    ["gen-data", "--buses", "1", "--hours", "24", "--out", "unused"],
])
def test_data_errors_exit_two(tmp_path, capsys, args):
    args = [str(tmp_path / a) if a in ("missing.json", "missing", "unused") else a for a in args]
    assert main(args) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_bad_detection_threshold(tmp_path):
    assert main(["detect", "--model", "m.json", "--dataset", str(tmp_path), "--threshold", "0.3"]) == 1
