import json
import subprocess
import sys

import pytest

from cedar.cli import main
from cedar.evaluation import PredictionRecord
from cedar.io import read_jsonl, write_jsonl
from cedar.pipeline import SentencePrediction, run_paths
from helpers import FIXTURE_CONFIG, TINY_TRAINING


def run_args(cfg):
    """Command-line flags reproducing a test run's configuration."""
    sets = [f"paths.{k}={cfg['paths.' + k]}" for k in ("ontology", "corpus", "work_dir")]
    sets += [f"{k}={v}" for k, v in TINY_TRAINING]
    out = ["--config", str(FIXTURE_CONFIG)]
    for s in sets:
        out += ["--set", s]
    return out


def call(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestErrors:
    def test_missing_dependency_json(self, capsys, tmp_path):
        code, out, err = call(capsys, ["train-ti", "--config", str(FIXTURE_CONFIG), "--work-dir", str(tmp_path)])
        assert code == 2 and out == ""
        payload = json.loads(err.strip().splitlines()[-1])
        assert payload["error"] == "DependencyError" and payload["missing_stage"] == "build-data"

    def test_bad_config_key(self, capsys, tmp_path):
        code, _, err = call(capsys, ["build-data", "--set", "ranker.bogus=1", "--work-dir", str(tmp_path)])
        assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "ConfigError"

    def test_bad_threshold_flag(self, capsys, tmp_path):
        code, _, err = call(capsys, ["self-label", "--threshold", "2", "--work-dir", str(tmp_path)])
        assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "ConfigError"

    def test_missing_input_file(self, capsys, tmp_path):
        code, _, err = call(capsys, ["evaluate", "--gold", str(tmp_path / "nope.jsonl"),
                                     "--pred", str(tmp_path / "nope.jsonl")])
        assert code == 1 and "FileNotFoundError" in err

    def test_gold_without_pred(self, capsys, tmp_path):
        code, _, _ = call(capsys, ["evaluate", "--gold", str(tmp_path / "g.jsonl")])
        assert code == 2


def test_standalone_evaluate(capsys, tmp_path):
    gold = tmp_path / "gold.jsonl"
    write_jsonl(gold, [{"sent_id": "s1", "doc_id": "d", "tokens": ["a", "b", "c"],
                        "mentions": [{"mention_id": "m1", "start": 1, "end": 1, "roleset_id": "r.01",
                                      "gold_type_id": "A"}]}])
    pred = tmp_path / "pred.jsonl"
    events = [PredictionRecord("s1", (1, 1), (("B", 0.9), ("A", 0.4)))]
    write_jsonl(pred, [SentencePrediction("s1", events).to_record()])
    code, out, _ = call(capsys, ["evaluate", "--gold", str(gold), "--pred", str(pred), "--ks", "1,2"])
    report = json.loads(out)
    assert code == 0 and report["ti_f1"] == 1.0 and report["tc_f1"] == 0.0
    assert report["hit_at"] == {"1": 0.0, "2": 1.0}


def test_generate_fixture(capsys, tmp_path):
    code, out, _ = call(capsys, ["generate-fixture", "--out", str(tmp_path), "--n-types", "4",
                                 "--sentences-per-type", "5", "--seed", "3"])
    assert code == 0 and set(json.loads(out)["outputs"]) == {"ontology", "corpus", "truth", "spec"}
    assert len(read_jsonl(tmp_path / "corpus.jsonl")) == 20
    assert json.loads((tmp_path / "fixture.json").read_text())["seed"] == 3


class TestOnTrainedRun:
    def test_predict_ti(self, capsys, tiny_run, tmp_path):
        out_path = tmp_path / "ti.jsonl"
        dev = run_paths(tiny_run.cfg.work_dir)["dev"]
        code, _, _ = call(capsys, ["predict-ti", *run_args(tiny_run.cfg), "--input", str(dev),
                                   "--out", str(out_path), "--threshold", "0.3"])
        recs = read_jsonl(out_path)
        assert code == 0 and len(recs) == len(read_jsonl(dev))
        for r in recs:
            assert all(0.3 <= s["prob"] <= 1.0 and s["start"] <= s["end"] for s in r["spans"])

    def test_rank(self, capsys, tiny_run, tmp_path):
        out_path = tmp_path / "rank.jsonl"
        dev = run_paths(tiny_run.cfg.work_dir)["dev"]
        code, _, _ = call(capsys, ["rank", *run_args(tiny_run.cfg), "--input", str(dev),
                                   "--out", str(out_path), "--topk", "3"])
        recs = read_jsonl(out_path)
        assert code == 0 and all(len(r["topk"]) == 3 for r in recs)
        assert all(r["topk"][0]["score"] >= r["topk"][-1]["score"] for r in recs)

    def test_classify(self, capsys, tiny_run, tmp_path):
        out_path = tmp_path / "cls.jsonl"
        dev = run_paths(tiny_run.cfg.work_dir)["dev"]
        code, _, _ = call(capsys, ["classify", *run_args(tiny_run.cfg), "--input", str(dev),
                                   "--out", str(out_path)])
        recs = read_jsonl(out_path)
        assert code == 0 and recs
        assert all(r["chosen_type"] == r["ranked_types"][0]["type_id"] for r in recs)

    def test_evaluate_rerun_with_ks(self, capsys, tiny_run, tmp_path):
        out_path = tmp_path / "report.json"
        code, out, _ = call(capsys, ["evaluate", *run_args(tiny_run.cfg), "--out", str(out_path)])
        assert code == 0 and json.loads(out)["stage"] == "evaluate"
        assert "end_to_end" in json.loads(out_path.read_text())


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "cedar.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("build-data", "run-all", "predict-ti", "rank", "classify", "generate-fixture"):
        assert command in proc.stdout


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["train-everything"])
