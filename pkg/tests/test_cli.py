import json

import numpy as np
import pytest

from smunet.cli import ABLATION_HEADER, RunManifest, ablation_grid, main
from smunet.engine import TrainConfig
from smunet.objectives import LossReport

TINY = {"spatial_size": [16, 16, 16], "unet": {"base_width": 4, "norm_groups": 2}, "epochs": 1}


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
            and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["synth", "--seed", "7", "--count", "4", "--size", "16", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset, config_file):
    out = tmp_path_factory.mktemp("runs") / "adv"
    assert main(["train", "--config", str(config_file), "--data", str(dataset), "--out", str(out),
                 "--style-module", "adversarial", "--epochs", "2", "--seed", "3"]) == 0
    return out


def test_synth_writes_cases_and_manifest(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["synth", "--seed", "7", "--count", "20", "--size", "32", "--out", str(out)]) == 0
    cases = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(cases) == 20
    assert "20 cases" in capsys.readouterr().out
    manifest = RunManifest.read(out)
    assert manifest.config["phantom"]["seed"] == 7
    assert manifest.finished and len(manifest.outputs) == 20 and len(manifest.run_id) == 12


def test_synth_is_byte_reproducible(tmp_path, dataset):
    again = tmp_path / "again"
    main(["synth", "--seed", "7", "--count", "4", "--size", "16", "--out", str(again)])
    assert tree_bytes(again) == tree_bytes(dataset)
    assert RunManifest.read(again).run_id == RunManifest.read(dataset).run_id


def test_synth_rejects_bad_size(tmp_path, capsys):
    assert main(["synth", "--size", "30", "--out", str(tmp_path / "x")]) == 2
    assert "divisible by 16" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_synth_refuses_non_empty_dir_without_force(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / "junk").write_text("x")
    assert main(["synth", "--count", "1", "--size", "16", "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["synth", "--count", "1", "--size", "16", "--out", str(out), "--force"]) == 0


def test_synth_config_file_and_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"num_volumes": 2, "spatial_size": [16, 16, 16], "seed": 4}))
    main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")])
    assert RunManifest.read(tmp_path / "a").config["phantom"]["num_volumes"] == 2
    main(["synth", "--config", str(cfg), "--count", "3", "--seed", "9", "--out", str(tmp_path / "b")])
    phantom = RunManifest.read(tmp_path / "b").config["phantom"]
    assert phantom["num_volumes"] == 3 and phantom["seed"] == 9
    monkeypatch.setenv("SMUNET_SEED", "13")
    main(["synth", "--count", "1", "--size", "16", "--out", str(tmp_path / "c")])
    assert RunManifest.read(tmp_path / "c").config["phantom"]["seed"] == 13
    main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")])
    assert RunManifest.read(tmp_path / "d").config["phantom"]["seed"] == 4


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err


def test_train_run_directory(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"manifest.json", "config.json", "losses.jsonl", "ckpt_epoch_1", "ckpt_epoch_2", "final.ckpt"} <= names
    lines = (run_dir / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 4
    assert all(np.isfinite(LossReport.from_json(line).joint) for line in lines)
    cfg = TrainConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    assert cfg.style_module == "adversarial" and cfg.epochs == 2 and cfg.seed == 3
    assert cfg.unet.base_width == 4
    assert RunManifest.read(run_dir).finished


def test_train_rejects_unknown_style_module(tmp_path, dataset, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--style-module", "gram"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "gram" in err and all(tag in err for tag in ("distribution", "adversarial", "texture"))
    assert not (tmp_path / "r").exists()


def test_train_missing_data(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 2
    assert "not found" in capsys.readouterr().err
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 2


def test_training_is_reproducible(tmp_path, dataset, config_file, run_dir):
    out = tmp_path / "again"
    main(["train", "--config", str(config_file), "--data", str(dataset), "--out", str(out),
          "--style-module", "adversarial", "--epochs", "2", "--seed", "3"])
    assert (out / "losses.jsonl").read_bytes() == (run_dir / "losses.jsonl").read_bytes()


def test_eval_full_table_and_plot(tmp_path, run_dir, dataset):
    table = tmp_path / "t.csv"
    plot = tmp_path / "t.png"
    assert main(["eval", "--run", str(run_dir), "--data", str(dataset), "--out", str(table),
                 "--plot", str(plot)]) == 0
    lines = table.read_text().splitlines()
    assert len(lines) == 17
    rows = np.array([[float(v) for v in line.split(",")[4:]] for line in lines[1:-1]])
    mean = [float(v) for v in lines[-1].split(",")[4:]]
    assert np.allclose(rows.mean(axis=0), mean, atol=1e-12)
    assert plot.stat().st_size > 0

    again = tmp_path / "t2.csv"
    main(["eval", "--run", str(run_dir), "--data", str(dataset), "--out", str(again)])
    assert again.read_bytes() == table.read_bytes()

    compared = tmp_path / "c.png"
    assert main(["eval", "--run", str(run_dir), "--data", str(dataset), "--out", str(tmp_path / "t3.csv"),
                 "--plot", str(compared), "--compare", f"other={table}"]) == 0


def test_eval_single_mask(tmp_path, run_dir, dataset):
    table = tmp_path / "one.csv"
    main(["eval", "--run", str(run_dir), "--data", str(dataset), "--out", str(table), "--mask", "1000"])
    lines = table.read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("1,0,0,0,")


def test_eval_missing_checkpoint(tmp_path, dataset, capsys):
    assert main(["eval", "--run", str(tmp_path), "--data", str(dataset), "--out", str(tmp_path / "t.csv")]) == 2
    assert "final checkpoint" in capsys.readouterr().err


def test_ablation_grid_toggles():
    grid = ablation_grid(TrainConfig())
    assert len(grid) == 6
    toggles = [t for t, _ in grid]
    assert [sum(t.values()) for t in toggles] == [2, 2, 2, 3, 3, 3]
    cons, content, style = (c for _, c in grid[:3])
    assert cons.weights.lambda_consistency == 0 and cons.weights.lambda_content == 1
    assert content.weights.lambda_content == 0 and content.weights.lambda_style == 1
    assert style.weights.lambda_style == 0 and not style.use_modification
    assert [c.style_module for _, c in grid[3:]] == ["distribution", "texture", "adversarial"]


def test_ablate_writes_six_rows(tmp_path, dataset, config_file):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config_file), "--data", str(dataset), "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0].split(",") == ABLATION_HEADER
    assert len(lines) == 7
    for line in lines[1:]:
        fields = line.split(",")
        scores = [float(v) for v in fields[4:7]]
        assert float(fields[7]) == pytest.approx(np.mean(scores), abs=1e-12)
    assert [line.split(",")[3] for line in lines[1:]][3:] == ["distribution", "texture", "adversarial"]
    assert RunManifest.read(out).finished


def test_no_command_prints_usage(capsys):
    with pytest.raises(SystemExit):
        main([])
    assert "usage" in capsys.readouterr().err
