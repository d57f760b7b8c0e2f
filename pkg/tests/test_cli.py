import json
import re
from pathlib import Path

import pytest

from cogscreen.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> preprocess -> match artifacts shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.jsonl"
    clean = root / "clean.jsonl"
    features = root / "features.csv"
    assert run_cli("generate", "--out", corpus, "--n", "60", "--seed", "3") == 0
    assert run_cli("preprocess", "--in", corpus, "--out", clean) == 0
    assert run_cli("match", "--corpus", clean, "--out", features) == 0
    return {"root": root, "corpus": corpus, "clean": clean,
            "features": features}


class TestPipelineCommands:
    def test_artifacts_and_manifests_exist(self, pipeline):
        for key in ("corpus", "clean", "features"):
            path = pipeline[key]
            assert path.exists()
            manifest = Path(str(path) + ".manifest.json")
            assert manifest.exists()
            obj = json.loads(manifest.read_text())
            assert str(path) in obj["outputs"]
            assert "started_at" in obj and "finished_at" in obj

    def test_features_header(self, pipeline):
        header = pipeline["features"].read_text().splitlines()[0]
        cols = header.split(",")
        assert cols[0] == "patient_id"
        assert len(cols) == 16

    def test_train_linear_baseline_and_evaluate(self, pipeline):
        root = pipeline["root"]
        model = root / "baseline.json"
        scores = root / "baseline_scores.csv"
        rc = run_cli("train-linear", "--model", "baseline",
                     "--corpus", pipeline["corpus"], "--out", model,
                     "--scores-out", scores, "--folds", "5",
                     "--seed", "1", "--split-seed", "1")
        assert rc == 0
        obj = json.loads(model.read_text())
        assert set(obj["weights"]) == {"med_count", "icd_count"}

        report = root / "report.json"
        assert run_cli("evaluate", "--scores", scores, "--out", report) == 0
        rep = json.loads(report.read_text())
        assert {"auc", "threshold", "tp", "fp", "fn", "tn"} <= set(rep)

    def test_train_linear_regex_from_features(self, pipeline):
        root = pipeline["root"]
        model = root / "regex.json"
        scores = root / "regex_scores.csv"
        rc = run_cli("train-linear", "--model", "regex",
                     "--corpus", pipeline["corpus"],
                     "--features", pipeline["features"],
                     "--out", model, "--scores-out", scores,
                     "--folds", "5", "--seed", "1", "--split-seed", "1")
        assert rc == 0
        assert len(json.loads(model.read_text())["weights"]) == 15

    def test_compare_markdown_table(self, pipeline, capsys):
        root = pipeline["root"]
        b = root / "baseline_scores.csv"
        r = root / "regex_scores.csv"
        out = root / "table.md"
        rc = run_cli("compare", f"baseline={b}", f"regex={r}", "--out", out)
        assert rc == 0
        text = out.read_text()
        assert text.startswith("| Model | AUC | Accuracy | FP | FN |")
        assert "| baseline |" in text and "| regex |" in text

    def test_tfidf_fit_and_rank(self, pipeline, capsys):
        root = pipeline["root"]
        model = root / "tfidf.json"
        rc = run_cli("tfidf", "fit", "--corpus", pipeline["corpus"],
                     "--clean", pipeline["clean"], "--out", model)
        assert rc == 0
        rc = run_cli("tfidf", "rank", "--model", model, "--top", "5")
        assert rc == 0
        printed = capsys.readouterr().out
        assert printed.startswith("| Rank | Terms | CorrCoef |")
        assert len(printed.strip().splitlines()) == 2 + 5


class TestDeterminism:
    def _strip_times(self, manifest_path):
        obj = json.loads(Path(manifest_path).read_text())
        obj.pop("started_at")
        obj.pop("finished_at")
        return obj

    def test_same_seed_byte_identical_artifacts(self, tmp_path):
        outs = []
        for run in range(2):
            out = tmp_path / f"c{run}.jsonl"
            assert run_cli("generate", "--out", out, "--n", "25",
                           "--seed", "7") == 0
            outs.append(out)
        assert outs[0].read_bytes() == outs[1].read_bytes()
        m0 = self._strip_times(str(outs[0]) + ".manifest.json")
        m1 = self._strip_times(str(outs[1]) + ".manifest.json")
        m0["argv"][m0["argv"].index(str(outs[0]))] = "X"
        m1["argv"][m1["argv"].index(str(outs[1]))] = "X"
        m0["outputs"] = list(m0["outputs"].values())
        m1["outputs"] = list(m1["outputs"].values())
        assert m0 == m1

    def test_pipeline_rerun_same_hashes(self, tmp_path):
        hashes = []
        for run in range(2):
            corpus = tmp_path / f"corpus{run}.jsonl"
            clean = tmp_path / f"clean{run}.jsonl"
            model = tmp_path / f"model{run}.json"
            scores = tmp_path / f"scores{run}.csv"
            run_cli("generate", "--out", corpus, "--n", "30", "--seed", "11")
            run_cli("preprocess", "--in", corpus, "--out", clean)
            run_cli("train-linear", "--model", "baseline", "--corpus", corpus,
                    "--out", model, "--scores-out", scores, "--folds", "5",
                    "--seed", "11", "--split-seed", "11")
            stage_hashes = []
            for artifact in (clean, model):
                manifest = json.loads(
                    Path(str(artifact) + ".manifest.json").read_text())
                stage_hashes.extend(sorted(manifest["outputs"].values()))
            hashes.append(stage_hashes)
        assert hashes[0] == hashes[1]


class TestErrors:
    def test_unknown_subcommand_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--bogus"])
        assert exc.value.code == 2

    def test_missing_input_exit_1(self, tmp_path):
        rc = main(["preprocess", "--in", str(tmp_path / "nope.jsonl"),
                   "--out", str(tmp_path / "out.jsonl")])
        assert rc == 1

    def test_no_partial_artifact_on_failure(self, tmp_path):
        out = tmp_path / "out.jsonl"
        main(["preprocess", "--in", str(tmp_path / "nope.jsonl"),
              "--out", str(out)])
        assert not out.exists()
        assert not list(tmp_path.glob(".*.tmp"))


class TestIterateCommand:
    def test_local_iteration(self, pipeline, tmp_path, capsys):
        rc = run_cli("iterate", "--corpus", pipeline["corpus"],
                     "--clean", pipeline["clean"],
                     "--journal", tmp_path / "j.journal",
                     "--backend", "stub")
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert "created_tasks" in out and "queue_pending" in out
