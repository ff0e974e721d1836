import csv
import json

import pytest

from screenseg.cli import main
from screenseg.plots import plot_dice_vs_threshold, plot_fp_fn, read_sweep_csv


def tiny_config(data_dir, **over):
    cfg = {
        "seed": 2,
        "data_dir": str(data_dir),
        "phantom": {"image_height": 32, "image_width": 32, "gland_axis_range": [6, 10], "n_patients": 5, "frames_per_patient": 4},
        "train": {"epochs": 1, "clf_epochs": 1, "batch_size": 8},
        "segmenter": {"depth": 3, "base_channels": 4},
        "folds": 2,
        "strategies": ["vote", "combine:0.5"],
        "losses": ["dice"],
    }
    cfg.update(over)
    return cfg


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data, both trainings, eval and sweep on a tiny config."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    cfg = write_cfg(root / "cfg.json", tiny_config(data))
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    ck = root / "ck"
    for target in ("seg", "clf"):
        assert main(["train", "--target", target, "--config", str(cfg), "--out", str(root / "train"), "--checkpoints", str(ck), "--deterministic"]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(root / "eval"), "--checkpoints", str(ck)]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(root / "sweep"), "--checkpoints", str(ck)]) == 0
    return root, cfg, ck


def test_gen_data_rerun_unchanged(run, capsys):
    root, cfg, _ = run
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    out = capsys.readouterr().out
    assert "dataset unchanged" in out and "checksum" in out
    assert (root / "data" / "gen_data_config.json").is_file()


def test_train_layout(run):
    _, _, ck = run
    for cell in ("vote__dice", "combine-0.5__dice"):
        folds = sorted(p.name for p in (ck / "seg" / cell).iterdir())
        assert folds == ["fold0", "fold1"]
        for f in folds:
            assert (ck / "seg" / cell / f / "history.csv").is_file()
    assert (ck / "clf" / "model.json").is_file()


def test_eval_outputs(run):
    root, _, _ = run
    with open(root / "eval" / "eval_summary.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 6  # cells x thresholds
    assert "p_value" in rows[0] and "mean_dice_w" in rows[0] and "mean_dice_wo" in rows[0]
    assert {r["strategy"] for r in rows} == {"vote", "combine:0.5"}
    assert (root / "eval" / "eval_config.json").is_file()
    assert json.loads((root / "eval" / "eval_summary.json").read_text())["cells"]
    assert len(list((root / "eval" / "frames").glob("*.csv"))) == 2 * 7


def test_sweep_outputs(run, tmp_path):
    root, _, _ = run
    rows = read_sweep_csv(root / "sweep" / "sweep.csv")
    for strategy in ("vote", "combine:0.5"):
        for metric in ("fpr", "fnr", "fp_area"):
            swept = [r for r in rows if r["strategy"] == strategy and r["metric"] == metric and r["threshold"] != "seg_only"]
            assert len(swept) == 6
    for name in ("dice_vs_threshold.png", "fp_fn_rates.png"):
        assert (root / "sweep" / name).stat().st_size > 0
    # plots are a pure function of the CSV
    plot_dice_vs_threshold(rows, tmp_path / "a.png")
    plot_fp_fn(rows, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (root / "sweep" / "dice_vs_threshold.png").read_bytes()
    assert (tmp_path / "b.png").read_bytes() == (root / "sweep" / "fp_fn_rates.png").read_bytes()


def test_cache_env_override(run, tmp_path, monkeypatch):
    root, cfg, ck = run
    monkeypatch.setenv("SCREENSEG_CACHE", str(ck))
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval_summary.csv").read_bytes() == (root / "eval" / "eval_summary.csv").read_bytes()


def test_malformed_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "seed": 1,\n  oops\n}')
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize(
    "over",
    [
        {"strategies": ["combine:1.5"]},
        {"losses": ["focal"]},
        {"bogus": 1},
        {"train": {"learning_rate": 1}},
        {"phantom": {"n_patients": 0}},
    ],
)
def test_invalid_config_exit_2(tmp_path, over, capsys):
    cfg = write_cfg(tmp_path / "c.json", tiny_config(tmp_path / "d", **over))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_checkpoint_exit_1(run, tmp_path, capsys):
    _, cfg, _ = run
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path), "--checkpoints", str(tmp_path / "empty")]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_dataset_exit_1(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config(tmp_path / "nodata"))
    assert main(["train", "--target", "seg", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        main(["train", "--out", "x"])
    assert e.value.code == 2
