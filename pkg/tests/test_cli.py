import pandas as pd
import pytest

import main
from ingestion.dataset_io import load_dataset


@pytest.fixture
def tiny_ini(tiny_config, tmp_path):
    return str(tiny_config.write(tmp_path / "tiny.ini"))


def test_full_run(tiny_ini, tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main.run(["gen-data", "--config", tiny_ini, "--out", str(data)]) == 0
    assert len(load_dataset(data / "train.jsonl")) == 7
    assert len(load_dataset(data / "test.jsonl")) == 7

    assert main.run(["train", "--config", tiny_ini, "--data", str(data), "--out", str(run)]) == 0
    assert (run / "best.ckpt").exists() and (run / "seed.txt").read_text().strip() == "0"

    report_dir = tmp_path / "eval"
    assert main.run(["eval", "--config", tiny_ini, "--data", str(data), "--ckpt", str(run / "best.ckpt"),
                     "--out", str(report_dir)]) == 0
    routing = pd.read_csv(report_dir / "routing_report.csv")
    assert len(routing) == 7
    assert list(routing.columns) == ["sample_id", "weather", "w_L", "w_R", "w_F", "entropy"]
    evaluation = pd.read_csv(report_dir / "eval_report.csv")
    assert "total" in set(evaluation["category"])
    assert evaluation["ap"].between(0.0, 1.0).all()

    assert main.run(["inspect", "--config", tiny_ini, "--data", str(data / "test.jsonl"),
                     "--ckpt", str(run / "final.ckpt"), "--out", str(tmp_path / "inspect")]) == 0
    for folder in (data, report_dir, tmp_path / "inspect"):
        assert (folder / "resolved_config.ini").read_text() == (run / "resolved_config.ini").read_text()
        assert (folder / "seed.txt").read_text().strip() == "0"


def test_checkpoint_mismatch_exits_nonzero(tiny_config, tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    ini = str(tiny_config.write(tmp_path / "tiny.ini"))
    assert main.run(["gen-data", "--config", ini, "--out", str(data)]) == 0
    assert main.run(["train", "--config", ini, "--data", str(data), "--out", str(run)]) == 0

    tiny_config.model.bev_channels = 6
    other = str(tiny_config.write(tmp_path / "other.ini"))
    assert main.run(["eval", "--config", other, "--data", str(data), "--ckpt", str(run / "best.ckpt"),
                     "--out", str(tmp_path / "eval")]) == 1


def test_missing_dataset_exits_nonzero(tiny_ini, tmp_path):
    assert main.run(["train", "--config", tiny_ini, "--data", str(tmp_path / "absent")]) == 1


def test_bad_config_exits_nonzero(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[loss]\nepsilon = 0.5\n", encoding="utf-8")
    assert main.run(["gen-data", "--config", str(path), "--out", str(tmp_path / "data")]) == 1


def test_gradcheck_command(tiny_ini):
    assert main.run(["gradcheck", "--config", tiny_ini, "--seed", "3", "--entries", "2"]) == 0


def test_eval_requires_checkpoint():
    with pytest.raises(SystemExit):
        main.run(["eval"])
