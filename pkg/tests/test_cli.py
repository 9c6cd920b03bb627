import json

import pandas as pd
import pytest

import safn.cli as cli

TINY_RUN = {
    "seed": 3,
    "synthetic": {
        "n_pd": 30,
        "n_hc": 18,
        "widths": {"mri_ct": 3, "clinical": 4, "mri_vol": 2, "demographic": 2},
        "signals": {"clinical": {"effect_size": 3.0, "informative_fraction": 0.5}},
        "n_categorical_demographic": 1,
    },
    "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "dropout": 0.0, "ffn_multiplier": 2, "head_hidden": 8},
    "optim": {"epochs": 2, "patience": 2, "batch_size": 16, "micro_batch": 8, "lr": 0.003},
    "cv": {"k": 3},
    "mlp": {"hidden": [8], "epochs": 2, "patience": 2, "batch_size": 16},
    "attribution": {"top_k": 5},
}


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


def _run(config, out, *args):
    return cli.run(["--no-color", "--log-level", "WARNING", "--config", str(config), "--output", str(out), *args])


def test_gen_data_writes_csv_and_manifest(tmp_path, run_config, capsys):
    dest = tmp_path / "data"
    assert _run(run_config, tmp_path / "out", "gen-data", "--dest", str(dest)) == 0
    frame = pd.read_csv(dest / "data.csv")
    assert frame.shape == (48, 3 + 4 + 2 + 2 + 2)
    manifest = json.loads((dest / "manifest.json").read_text())
    assert manifest["label_column"] == "COHORT"
    assert (dest / "resolved_config.json").exists()
    assert "Wrote 48 rows x 11 features" in capsys.readouterr().out


def test_cv_then_attribute_stats_and_report(tmp_path, run_config, capsys):
    out = tmp_path / "out"
    assert _run(run_config, out, "cv", "--synthetic") == 0

    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == 3 + 1
    assert list(metrics["fold"].astype(str)) == ["0", "1", "2", "mean"]
    gates = pd.read_csv(out / "gate_report.csv")
    assert gates["contribution_percent"].sum() == pytest.approx(100.0)
    for name in ("roc_curve_mean.csv", "pr_curve_mean.csv", "confusion_matrix_mean.csv", "fold2_epochs.csv"):
        assert (out / name).exists(), name
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["cv"]["seed"] == 3
    assert resolved["optim"]["seed"] == 3

    checkpoints = [str(out / f"fold{i}.ckpt.json") for i in range(3)]
    assert _run(run_config, out, "attribute", "--synthetic", "--checkpoint", *checkpoints) == 0
    top = pd.read_csv(out / "top_features.csv")
    assert list(top["rank"]) == [1, 2, 3, 4, 5]
    attribution = pd.read_csv(out / "attribution.csv")
    assert attribution["percent"].sum() == pytest.approx(100.0)
    assert (out / "pooling_attention_clinical.csv").exists()

    assert _run(run_config, out, "stats", "--synthetic") == 0
    stats = pd.read_csv(out / "group_stats.csv")
    assert len(stats) == 11

    capsys.readouterr()
    assert cli.run(["--no-color", "--log-level", "WARNING", "report", str(out)]) == 0
    report = (out / "report.md").read_text()
    assert "## Cross-validated performance" in report
    assert "## Modality gates" in report
    assert "## Group differences" in report


def test_repeated_cv_writes_identical_metrics(tmp_path, run_config):
    first, second = tmp_path / "first", tmp_path / "second"
    assert _run(run_config, first, "cv", "--synthetic") == 0
    assert _run(run_config, second, "cv", "--synthetic") == 0
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
    assert (first / "gate_report.csv").read_bytes() == (second / "gate_report.csv").read_bytes()


def test_train_single_fold_and_ablate(tmp_path, run_config):
    out = tmp_path / "out"
    assert _run(run_config, out, "train", "--synthetic", "--fold", "1", "--ablation", "SAFN w/o gates") == 0
    assert (out / "fold1.ckpt.json").exists()
    assert pd.read_csv(out / "fold1_metrics.csv").loc[0, "fold"] == 1

    assert _run(run_config, out, "ablate", "--synthetic", "Plain MLP (concat all features)", "--include-logreg") == 0
    frame = pd.read_csv(out / "ablation_results.csv")
    assert list(frame["model"]) == [
        "SAFN (full)",
        "Plain MLP (concat all features)",
        "Logistic regression (concat all features)",
    ]
    assert set(frame["status"]) == {"ok"}


def test_exit_codes(tmp_path, run_config, capsys):
    out = tmp_path / "out"
    assert _run(run_config, out, "no-such-command") == 1
    assert _run(run_config, out, "cv") == 1
    assert "No dataset given" in capsys.readouterr().err
    assert _run(run_config, out, "--set", "data.data_dir=" + str(tmp_path / "nowhere"), "cv") == 2
    assert _run(run_config, out, "--set", "bogus.key=1", "cv") == 1
    assert _run(run_config, out, "--set", "optim.patience=9", "cv", "--synthetic") == 1
    assert _run(run_config, out, "train", "--synthetic", "--ablation", "unknown") == 1

    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.run(["--no-color", "report", str(empty)]) == 2
    assert cli.run(["--no-color", "report", str(tmp_path / "absent")]) == 2


def test_output_dir_defaults_to_env(tmp_path, run_config, safn_output_dir, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.run(["--no-color", "--log-level", "WARNING", "--config", str(run_config), "gen-data"]) == 0
    assert (safn_output_dir / "data" / "data.csv").exists()


def test_main_maps_keyboard_interrupt(monkeypatch):
    def interrupted(argv=None):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "run", interrupted)
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 130
