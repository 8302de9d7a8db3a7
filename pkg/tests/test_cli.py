"""
Command-line surface: exit codes and JSON on stdout.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from protoguard.cli import build_parser, main
from protoguard.services.training import EXPORT_FILE


def run(capsys: pytest.CaptureFixture[str], *argv: str) -> tuple[int, object]:
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture
def tiny_config_file(make_config, tmp_path) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(make_config(epochs=1, warmup_epochs=1).to_json(), encoding="utf-8")
    return path


class TestGenerateData:
    def test_writes_dataset(self, capsys, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"classes": 2, "images_per_class": 5, "image_size": 8}))
        out = tmp_path / "d"
        code, payload = run(capsys, "--seed", "3", "generate-data", "--spec", str(spec), "--out", str(out))
        assert code == 0
        assert payload == {"dataset": str(tmp_path / "d"), "images": 10}
        assert json.loads((tmp_path / "d" / "dataset.json").read_text())["seed"] == 3

    def test_invalid_spec_exits_2(self, capsys, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"classes": 40}))
        code, payload = run(capsys, "generate-data", "--spec", str(spec), "--out", str(tmp_path / "d"))
        assert code == 2 and payload is None


class TestTrain:
    def test_bad_config_exits_2(self, capsys, tmp_path, dataset_dir):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train": {"epochs": 0}}))
        code, _ = run(
            capsys, "train", "--config", str(config), "--data", str(dataset_dir), "--out", str(tmp_path)
        )
        assert code == 2

    def test_missing_dataset_exits_2(self, capsys, tmp_path, tiny_config_file):
        config = str(tiny_config_file)
        code, _ = run(capsys, "train", "--config", config, "--data", str(tmp_path), "--out", str(tmp_path))
        assert code == 2

    @pytest.mark.slow
    def test_one_epoch(self, capsys, tmp_path, tiny_config_file, dataset_dir):
        code, summary = run(
            capsys,
            "--threads",
            "2",
            "train",
            "--config",
            str(tiny_config_file),
            "--data",
            str(dataset_dir),
            "--out",
            str(tmp_path / "run"),
        )
        assert code == 0
        assert summary["epochs"] == 1
        assert Path(summary["inference_export"]).is_file()


@pytest.mark.slow
def test_evaluate_command(capsys, tmp_path, trained_run, detection_dataset):
    trainer, _ = trained_run
    attacks = tmp_path / "attacks.json"
    attacks.write_text(json.dumps([{"algorithm": "fgsm"}]))
    code, report = run(
        capsys,
        "evaluate",
        "--checkpoint",
        str(trainer.out / EXPORT_FILE),
        "--data",
        str(detection_dataset.root),
        "--attacks",
        str(attacks),
        "--out",
        str(tmp_path / "eval"),
    )
    assert code == 0
    assert report["clean_pass_rate"] == 0.95
    assert [row["name"] for row in report["attacks"]] == ["fgsm"]
    assert (tmp_path / "eval" / "report.json").is_file()


class TestHarness:
    def test_gradcheck(self, capsys):
        code, rows = run(capsys, "gradcheck", "--module", "tensor", "--configurations", "1")
        assert code == 0
        assert rows and all(row["passed"] for row in rows)

    def test_bench(self, capsys):
        code, rows = run(capsys, "bench", "--sizes", "4", "--workers", "1,2", "--repeats", "1")
        assert code == 0
        assert [row["workers"] for row in rows] == [1, 2]
        assert all(row["identical"] for row in rows)

    def test_bad_list_argument(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["bench", "--sizes", "four"])
        assert exc.value.code == 2

    def test_command_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])
