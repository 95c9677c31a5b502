import json

import numpy as np
import pytest
from typer.testing import CliRunner

from rris.cli import app
from rris.dataset import deserialize

runner = CliRunner()


@pytest.fixture(scope="module")
def built(annotations_path, tmp_path_factory):
    path = tmp_path_factory.mktemp("build") / "val.json"
    result = runner.invoke(app, ["build", "--input", str(annotations_path), "--output", str(path), "--mode", "val"])
    assert result.exit_code == 0, result.output
    return path


def _synth(built, tmp_path, policy):
    path = tmp_path / f"{policy}.json"
    result = runner.invoke(app, ["synth-predictions", "-i", str(built), "-o", str(path), "--policy", policy])
    assert result.exit_code == 0, result.output
    return path


def _eval_json(built, predictions):
    result = runner.invoke(app, ["eval", "-i", str(built), "-p", str(predictions), "--json"])
    assert result.exit_code == 0, result.output
    return json.loads(result.stdout)


class TestBuild:
    def test_val_has_ten_negatives(self, built):
        robust = deserialize(built)
        assert len(robust.references) == 20
        assert all(len(ref.negatives) == 10 for ref in robust.references)

    def test_prints_strategy_counts(self, annotations_path, tmp_path):
        out = tmp_path / "val.json"
        result = runner.invoke(app, ["build", "-i", str(annotations_path), "-o", str(out), "--json"])
        summary = json.loads(result.stdout)
        assert summary["references"] == 20
        assert sum(summary["strategies"].values()) == 200

    def test_byte_identical(self, annotations_path, built, tmp_path):
        again = tmp_path / "again.json"
        runner.invoke(app, ["build", "-i", str(annotations_path), "-o", str(again), "--mode", "val"])
        assert again.read_bytes() == built.read_bytes()

    def test_seed_changes_output(self, annotations_path, built, tmp_path):
        other = tmp_path / "other.json"
        runner.invoke(app, ["build", "-i", str(annotations_path), "-o", str(other), "--seed", "7"])
        assert other.read_bytes() != built.read_bytes()

    def test_train_mode(self, annotations_path, tmp_path):
        out = tmp_path / "train.json"
        result = runner.invoke(app, ["build", "-i", str(annotations_path), "-o", str(out), "--mode", "train"])
        assert result.exit_code == 0, result.output
        assert all(len(ref.negatives) == len(ref.sentences) for ref in deserialize(out).references)

    def test_missing_input(self, tmp_path):
        result = runner.invoke(app, ["build", "-i", str(tmp_path / "nope.json"), "-o", str(tmp_path / "out.json")])
        assert result.exit_code == 2
        assert "not found" in result.output
        assert not (tmp_path / "out.json").exists()

    def test_unknown_mode(self, annotations_path, tmp_path):
        result = runner.invoke(app, ["build", "-i", str(annotations_path), "-o", str(tmp_path / "o.json"), "--mode", "test"])
        assert result.exit_code == 2

    def test_generation_exhausted(self, tmp_path):
        data = {
            "images": [{"id": 1, "width": 2, "height": 1, "categories_present": [1, 2]}],
            "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "bicycle"}],
            "references": [
                {"ref_id": 1, "image_id": 1, "split": "val", "sentences": ["left one"], "gt_rle": {"size": [1, 2], "counts": [0, 1, 1]}}
            ],
        }
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        result = runner.invoke(app, ["build", "-i", str(path), "-o", str(tmp_path / "out.json")])
        assert result.exit_code == 3
        assert "generation-exhausted" in result.output


class TestStats:
    def test_table(self, built):
        result = runner.invoke(app, ["stats", "-i", str(built)])
        assert result.exit_code == 0
        assert "val" in result.stdout
        assert "10.000000" in result.stdout

    def test_json(self, built):
        result = runner.invoke(app, ["stats", "-i", str(built), "--json"])
        stats = json.loads(result.stdout)
        assert stats["val"] == {
            "reference_count": 12,
            "positives_per_reference": 2.0,
            "negatives_per_reference": 10.0,
            "sentences_per_reference": 12.0,
        }

    def test_empty_dataset(self, built, tmp_path):
        data = json.loads(built.read_text(encoding="utf-8"))
        data["references"] = []
        path = tmp_path / "empty.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        result = runner.invoke(app, ["stats", "-i", str(path)])
        assert result.exit_code == 2
        assert "empty-input" in result.output


class TestEval:
    def test_perfect(self, built, tmp_path):
        report = _eval_json(built, _synth(built, tmp_path, "perfect"))
        assert report["r_iou"] == 1.0
        assert report["m_rr"] == 1.0
        assert report["precision_at"] == {"0.5": 1.0, "0.7": 1.0, "0.9": 1.0}
        assert report["reference_count"] == 20
        assert {"category_name", "random_sentence", "replace_target"} <= set(report["per_strategy"])

    def test_all_empty(self, built, tmp_path):
        report = _eval_json(built, _synth(built, tmp_path, "empty"))
        assert report["r_iou"] == 0.0
        assert report["m_rr"] == 1.0
        assert report["r2vos_r"] is None

    def test_writes_report_and_table(self, built, tmp_path):
        out = tmp_path / "report.json"
        result = runner.invoke(app, ["eval", "-i", str(built), "-p", str(_synth(built, tmp_path, "full")), "-o", str(out)])
        assert result.exit_code == 0
        assert "rIoU" in result.stdout
        assert json.loads(out.read_text(encoding="utf-8"))["m_rr"] == 0.0

    def test_missing_predictions(self, built, tmp_path):
        path = _synth(built, tmp_path, "perfect")
        data = json.loads(path.read_text(encoding="utf-8"))
        dropped = data.pop()
        path.write_text(json.dumps(data), encoding="utf-8")
        result = runner.invoke(app, ["eval", "-i", str(built), "-p", str(path)])
        assert result.exit_code == 2
        assert "missing-predictions" in result.output
        assert str(dropped["ref_id"]) in result.output

    def test_custom_thresholds(self, built, tmp_path):
        path = _synth(built, tmp_path, "perfect")
        result = runner.invoke(app, ["eval", "-i", str(built), "-p", str(path), "--thresholds", "0.25,0.75", "--json"])
        assert sorted(json.loads(result.stdout)["precision_at"]) == ["0.25", "0.75"]

    @pytest.mark.parametrize("thresholds", ["1.5", "0", "a,b"])
    def test_invalid_thresholds(self, built, tmp_path, thresholds):
        path = _synth(built, tmp_path, "perfect")
        result = runner.invoke(app, ["eval", "-i", str(built), "-p", str(path), "--thresholds", thresholds])
        assert result.exit_code == 2


class TestValidate:
    def test_fresh_build_passes(self, built):
        result = runner.invoke(app, ["validate", "-i", str(built)])
        assert result.exit_code == 0, result.output
        assert "0 invalid" in result.stdout

    def test_corrupted_negative(self, built, tmp_path):
        robust = deserialize(built)
        ref = robust.references[0]
        present = robust.categories.name_of(robust.image_of(ref).categories_present[0])
        data = json.loads(built.read_text(encoding="utf-8"))
        data["references"][0]["negatives"][0]["text"] = present
        path = tmp_path / "corrupt.json"
        path.write_text(json.dumps(data), encoding="utf-8")

        result = runner.invoke(app, ["validate", "-i", str(path), "--json"])
        assert result.exit_code == 2
        issues = json.loads(result.stdout)["issues"]
        assert [i["ref_id"] for i in issues] == [ref.ref_id]

    def test_no_negatives_pass(self, annotations_path):
        result = runner.invoke(app, ["validate", "-i", str(annotations_path)])
        assert result.exit_code == 0
        assert "0 negatives checked" in result.stdout


class TestToyModel:
    def test_gradcheck_passes(self):
        result = runner.invoke(app, ["gradcheck"])
        assert result.exit_code == 0, result.output
        assert result.stdout.startswith("PASS")

    def test_gradcheck_corrupted(self):
        result = runner.invoke(app, ["gradcheck", "--corrupt", "--samples", "10", "--json"])
        assert result.exit_code == 2
        assert json.loads(result.stdout)["passed"] is False

    def test_demo_trace(self, annotations_path):
        config = annotations_path.parent / "model_config.json"
        result = runner.invoke(app, ["demo-model", "--model-config", str(config), "--json"])
        assert result.exit_code == 0, result.output
        dump = json.loads(result.stdout)
        for sums in dump["attention_row_sums"].values():
            assert np.abs(np.array(sums) - 1.0).max() < 1e-9
        assert dump["losses"] == []

    def test_demo_training(self, tmp_path):
        out = tmp_path / "trace.json"
        result = runner.invoke(app, ["demo-model", "--train-steps", "2", "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert "step 1: loss" in result.stdout
        assert len(json.loads(out.read_text(encoding="utf-8"))["losses"]) == 2

    def test_demo_with_text(self, annotations_path):
        config = annotations_path.parent / "model_config.json"
        args = ["demo-model", "--model-config", str(config), "--text", "Man in blue hat", "--text", "left guy", "--json"]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        dump = json.loads(result.stdout)
        assert dump["prompt"] == "man in blue hat left guy"
        assert dump["param_count"] > 0
        assert len(dump["e_hat"]) == 2

    def test_demo_text_truncated(self):
        result = runner.invoke(app, ["demo-model", "--text", " ".join(["word"] * 25), "--json"])
        assert result.exit_code == 0, result.output
        assert len(json.loads(result.stdout)["prompt"].split()) == 20

    def test_demo_text_without_words(self):
        assert runner.invoke(app, ["demo-model", "--text", "?"]).exit_code == 2

    def test_bad_model_config(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"image_size": 30}), encoding="utf-8")
        assert runner.invoke(app, ["gradcheck", "--model-config", str(path)]).exit_code == 2
