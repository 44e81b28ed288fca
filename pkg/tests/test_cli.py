import json
import subprocess
import sys

import numpy as np
import pytest

from regionembed.cli import main

TINY = ["--d", "8", "--d-prime", "4", "--d-m", "4", "--channels", "2", "--heads", "2",
        "--intra-layers", "1", "--inter-layers", "1", "--fusion-layers", "1"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--regions", "20", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir):
    out = data_dir.parent / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "3", *TINY]) == 0
    return out


def test_synth_outputs(data_dir):
    names = {p.name for p in data_dir.iterdir()}
    assert {"manifest.json", "mobility.csv", "poi.csv", "landuse.csv", "run_manifest.json"} <= names
    assert "target_crime.csv" in names


def test_synth_too_few_regions(tmp_path, capsys):
    assert main(["synth", "--regions", "5", "--out", str(tmp_path / "x")]) == 1
    assert "n" in capsys.readouterr().err


def test_synth_refuses_non_empty_dir(data_dir):
    assert main(["synth", "--regions", "20", "--out", str(data_dir)]) == 1


def test_train_outputs(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"checkpoint", "embeddings.csv", "embeddings.meta.json", "train.log.jsonl", "run_manifest.json"} <= names
    log = (run_dir / "train.log.jsonl").read_text().splitlines()
    assert len(log) == 3
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["model"]["d"] == 8
    assert manifest["config"]["train"]["epochs"] == 3


def test_config_file_precedence(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"d": 12, "heads": 3}, "train": {"epochs": 2, "seed": 5}}))
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(cfg), *TINY[2:],
                 "--heads", "2", "--epochs", "1"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["model"]["d"] == 12
    assert manifest["config"]["model"]["heads"] == 2
    assert manifest["config"]["train"]["epochs"] == 1
    assert manifest["seed"] == 5


def test_bad_model_config(data_dir, tmp_path, capsys):
    code = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--d", "143", "--heads", "4"])
    assert code == 1
    assert "divisible" in capsys.readouterr().err


def test_bad_data(tmp_path, capsys):
    (tmp_path / "bad").mkdir()
    code = main(["train", "--data", str(tmp_path / "bad"), "--out", str(tmp_path / "r"), *TINY])
    assert code == 2
    assert "manifest.json" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--nonsense"])
    assert info.value.code == 1


def test_evaluate_and_manifest_rerun(run_dir, data_dir, tmp_path):
    out = tmp_path / "eval"
    args = ["evaluate", "--embeddings", str(run_dir / "embeddings.csv"), "--data", str(data_dir),
            "--task", "crime", "--folds", "5", "--out", str(out)]
    assert main(args) == 0
    report = json.loads((out / "report_crime.json").read_text())
    assert report["k"] == 5 and len(report["folds"]) == 5
    assert "task: crime" in (out / "report_crime.txt").read_text()
    first = (out / "report_crime.json").read_bytes()
    (out / "report_crime.json").unlink()
    assert main(["evaluate", "--manifest", str(out / "run_manifest.json")]) == 0
    assert (out / "report_crime.json").read_bytes() == first


def test_evaluate_unknown_task(run_dir, data_dir, capsys):
    code = main(["evaluate", "--embeddings", str(run_dir / "embeddings.csv"), "--data", str(data_dir),
                 "--task", "traffic"])
    assert code == 1
    assert "crime" in capsys.readouterr().err


def test_evaluate_row_mismatch(data_dir, tmp_path):
    emb = tmp_path / "e.csv"
    np.savetxt(emb, np.zeros((3, 2)), delimiter=",")
    code = main(["evaluate", "--embeddings", str(emb), "--data", str(data_dir), "--task", "crime"])
    assert code == 2


def test_gradcheck_pass_and_fail(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--tol", "1e-12"]) == 3
    assert "FAIL worst parameter" in capsys.readouterr().out


def test_grid(data_dir, tmp_path):
    out = tmp_path / "grid"
    code = main(["grid", "--data", str(data_dir), "--out", str(out), "--task", "crime", "--d-list", "4,6",
                 "--layers-list", "1", "--folds", "4", "--epochs", "1", "--heads", "2", "--d-prime", "2",
                 "--d-m", "2", "--channels", "2", "--intra-layers", "1", "--inter-layers", "1"])
    assert code == 0
    rows = json.loads((out / "grid.json").read_text())
    assert [(r["d"], r["layers"], r["status"]) for r in rows] == [(4, 1, "ok"), (6, 1, "ok")]
    assert "MAE" in (out / "grid.txt").read_text()


def test_grid_marks_failed_cells(data_dir, tmp_path):
    out = tmp_path / "grid"
    code = main(["grid", "--data", str(data_dir), "--out", str(out), "--task", "crime", "--d-list", "3,4",
                 "--layers-list", "1", "--folds", "4", "--epochs", "1", "--heads", "2", "--d-prime", "2",
                 "--d-m", "2", "--channels", "2", "--intra-layers", "1", "--inter-layers", "1"])
    assert code == 0
    rows = json.loads((out / "grid.json").read_text())
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "regionembed", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()


def test_periodic_checkpoint(data_dir, tmp_path, monkeypatch):
    import regionembed.cli as cli

    seen = []
    original = cli.save_checkpoint

    def spy(directory, model, dataset, epoch, cfg=None):
        seen.append(epoch)
        return original(directory, model, dataset, epoch, cfg)

    monkeypatch.setattr(cli, "save_checkpoint", spy)
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "run"), "--epochs", "4",
                 "--checkpoint-every", "2", *TINY]) == 0
    # periodic saves at 2 and 4, then the final save
    assert seen == [2, 4, 4]
