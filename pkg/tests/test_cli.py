import csv
import json

import pytest

from hcal.cli import main, parse_config_text
from hcal.errors import ConfigError


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--levels", "2,4", "--per-class", "10", "--input-dim", "6", "--seed", "7", "--out", str(out)]) == 0
    return out


def train(data, out, *extra, epochs="3"):
    argv = ["train", "--taxonomy", str(data / "taxonomy.json"), "--train", str(data / "train.jsonl"),
            "--out", str(out), "--epochs", epochs, "--dim", "8", "--hidden-dims", "()", "--quiet", *extra]
    return main(argv)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_deterministic(data, tmp_path):
    assert main(["synth", "--levels", "2,4", "--per-class", "10", "--input-dim", "6", "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("taxonomy.json", "train.jsonl", "test.jsonl"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()
    assert (tmp_path / "config.txt").is_file()


def test_synth_requires_out(capsys):
    assert main(["synth", "--levels", "2,4"]) == 1
    assert "--out" in capsys.readouterr().err


def test_train_report(data, tmp_path):
    assert train(data, tmp_path, epochs="4") == 0
    report = rows(tmp_path / "report.csv")
    assert len(report) == 4
    for r in report:
        assert abs(float(r["lambda_1"]) + float(r["lambda_2"]) - 1) < 1e-9
    cfg = parse_config_text((tmp_path / "config.txt").read_text())
    assert cfg["epochs"] == "4" and cfg["dim"] == "8"
    assert (tmp_path / "checkpoint.npz").is_file() and (tmp_path / "timing.json").is_file()


def test_fixed_weights_flag(data, tmp_path):
    assert train(data, tmp_path, "--weighting", "fixed", "--fixed-weights", "0.5,0.5") == 0
    assert {(r["lambda_1"], r["lambda_2"]) for r in rows(tmp_path / "report.csv")} == {("0.5", "0.5")}


def test_ablate_perturbation_matches_epsilon_zero(data, tmp_path):
    assert train(data, tmp_path / "a", "--ablate", "perturbation") == 0
    assert train(data, tmp_path / "b", "--epsilon", "0") == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_config_file_and_seed_env(data, tmp_path, monkeypatch):
    conf = tmp_path / "run.cfg"
    conf.write_text(
        f"# tiny run\nepochs = 2\ndim = 8\nhidden_dims = ()\ntaxonomy = {data / 'taxonomy.json'}\n"
        f"train = {data / 'train.jsonl'}\nseed = 1\n"
    )
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "a"), "--quiet"]) == 0
    monkeypatch.setenv("HCAL_SEED", "5")
    assert main(["train", "--config", str(conf), "--out", str(tmp_path / "b"), "--quiet"]) == 0
    assert "seed = 5" in (tmp_path / "b" / "config.txt").read_text()
    assert (tmp_path / "a" / "report.csv").read_bytes() != (tmp_path / "b" / "report.csv").read_bytes()


def test_config_errors(data, tmp_path):
    conf = tmp_path / "bad.cfg"
    conf.write_text("epochs = 2\nlearning_rate = 3\n")
    assert main(["train", "--config", str(conf), "--out", str(tmp_path)]) == 1
    assert train(data, tmp_path, "--tau", "-1") == 1
    assert train(data, tmp_path, "--multi-task", "maybe") == 1
    with pytest.raises(ConfigError):
        parse_config_text("epochs 3")


def test_train_rejects_inconsistent_data(data, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"id": "x", "features": [0.0] * 6, "labels": [0, 1]}) + "\n")
    argv = ["train", "--taxonomy", str(data / "taxonomy.json"), "--train", str(bad), "--out", str(tmp_path), "--epochs", "1"]
    assert main(argv) == 2


def test_eval_and_metrics(data, tmp_path, capsys):
    assert train(data, tmp_path / "run") == 0
    ev = tmp_path / "ev"
    argv = ["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.npz"), "--test", str(data / "test.jsonl"),
            "--out", str(ev), "--hvr-norm", "paper_eq15", "--dump-embeddings"]
    assert main(argv) == 0
    doc = json.loads((ev / "metrics.json").read_text())
    assert doc["hvr_default"] == "paper_eq15" and doc["hvr"] == doc["hvr_paper_eq15"]
    assert "hvr_edge_fraction" in doc
    preds = [json.loads(l) for l in (ev / "predictions.jsonl").read_text().splitlines()]
    assert len(preds) == doc["n"] == 8
    assert (ev / "embeddings.csv").is_file() and (ev / "prototypes.csv").is_file()
    out = tmp_path / "m.json"
    argv = ["metrics", "--predictions", str(ev / "predictions.jsonl"), "--truths", str(data / "test.jsonl"),
            "--taxonomy", str(data / "taxonomy.json"), "--hvr-norm", "paper_eq15", "--out", str(out)]
    assert main(argv) == 0
    assert json.loads(out.read_text()) == doc


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "no.npz"), "--test", "x", "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_metrics_fixture(tmp_path, capsys):
    (tmp_path / "tax.json").write_text(json.dumps(
        {"levels": 2, "classes_per_level": [8, 4], "parents": [[0, 0, 1, 1, 2, 2, 3, 3]]}))
    truths = [[0, 0], [2, 1], [4, 2], [7, 3]]
    preds = [[0, 0], [2, 1], [5, 2], [7, 0]]
    (tmp_path / "t.jsonl").write_text("".join(
        json.dumps({"id": f"s{i}", "features": [0.0], "labels": t}) + "\n" for i, t in enumerate(truths)))
    (tmp_path / "p.jsonl").write_text("".join(
        json.dumps({"id": f"s{i}", "pred": p}) + "\n" for i, p in enumerate(preds)))
    argv = ["metrics", "--predictions", str(tmp_path / "p.jsonl"), "--truths", str(tmp_path / "t.jsonl"),
            "--taxonomy", str(tmp_path / "tax.json")]
    assert main(argv) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["hvr_edge_fraction"] == 0.25 and doc["hvr_paper_eq15"] == 0.03125
    (tmp_path / "p.jsonl").write_text(json.dumps({"id": "zzz", "pred": [0, 0]}) + "\n")
    assert main(argv) == 2


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    first = capsys.readouterr().out
    assert "PASS" in first
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out == first
    assert main(["gradcheck", "--corrupt"]) == 3
