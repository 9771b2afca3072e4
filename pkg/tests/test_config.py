import json

import pandas as pd
import pytest

from config import AppSettings, RunConfig, load_app_config, load_run_config
from errors import ConfigError
from nets import ModelDims
from run_manager import CONFIG_ECHO, METRICS, RunManager

EXPERIMENT = """
kind = "capm"
seed = 3

[train]
lam = 2.5
stage1_epochs = 4

[capm]
n_periods = 12
"""


@pytest.fixture
def experiment_file(tmp_path):
    path = tmp_path / "capm.toml"
    path.write_text(EXPERIMENT)
    return path


class TestRunConfig:
    """Defaults, TOML files and overrides"""

    def test_defaults(self):
        cfg = load_run_config()
        assert cfg.kind == "synth1"
        assert cfg.seed == 0
        assert cfg.effective_preset() == "synth"

    def test_toml_file(self, experiment_file):
        cfg = load_run_config(str(experiment_file))
        assert cfg.kind == "capm"
        assert cfg.train.lam == 2.5
        assert cfg.train.stage1_epochs == 4
        assert cfg.capm.n_periods == 12
        assert cfg.effective_preset() == "stocks"

    def test_overrides_beat_the_file(self, experiment_file):
        cfg = load_run_config(str(experiment_file), {"seed": 9, "train.lam": 0.0, "out": None})
        assert cfg.seed == 9
        assert cfg.train.lam == 0.0
        assert cfg.train.stage1_epochs == 4
        assert cfg.out is None

    def test_override_creates_sections(self):
        cfg = load_run_config(overrides={"backtest.horizon": 5})
        assert cfg.backtest.horizon == 5

    def test_unknown_field(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('kind = "synth1"\nlearning_rate = 3\n')
        with pytest.raises(ConfigError, match="learning_rate"):
            load_run_config(str(path))

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("kind = \n")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_run_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(str(tmp_path / "nope.toml"))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"kind": "mnist"})

    def test_model_dims(self):
        assert RunConfig(kind="synth2").model_dims(1024, 10) == ModelDims(1024, 4, 4, 10)
        stock = RunConfig(kind="capm").model_dims(100, 150)
        assert (stock.s_dim, stock.z_dim) == (20, 50)
        assert RunConfig(kind="capm", s_dim=8).model_dims(100, 150).s_dim == 8

    @pytest.mark.parametrize("kind, epochs, iterations", [
        ("synth1", 60, 2000), ("synth2", 60, 2000), ("capm", 30, 3000), ("panel", 30, 3000),
    ])
    def test_schedule_follows_kind(self, kind, epochs, iterations):
        cfg = load_run_config(overrides={"kind": kind})
        assert (cfg.train.stage1_epochs, cfg.train.stage2_iterations) == (epochs, iterations)

    def test_explicit_schedule_wins(self, experiment_file):
        cfg = load_run_config(str(experiment_file), {"kind": "synth1"})
        assert cfg.train.stage1_epochs == 4
        assert cfg.train.stage2_iterations == 2000

    def test_echo_is_sorted_json(self):
        echo = json.loads(RunConfig(seed=4).echo())
        assert echo["seed"] == 4
        assert list(echo) == sorted(echo)


class TestAppConfig:
    """config.json and its local override"""

    def test_missing_files_give_defaults(self, tmp_path):
        settings = load_app_config(tmp_path / "config.json", tmp_path / "config.local.json")
        assert settings == AppSettings()

    def test_local_overrides_shared(self, tmp_path):
        (tmp_path / "config.json").write_text(json.dumps({"output_root": "out", "probe_workers": 2}))
        (tmp_path / "config.local.json").write_text(json.dumps({"probe_workers": 8}))
        settings = load_app_config(tmp_path / "config.json", tmp_path / "config.local.json")
        assert settings.output_root == "out"
        assert settings.probe_workers == 8

    def test_invalid_json(self, tmp_path):
        (tmp_path / "config.json").write_text("{")
        with pytest.raises(ConfigError):
            load_app_config(tmp_path / "config.json", tmp_path / "config.local.json")

    def test_invalid_value(self, tmp_path):
        (tmp_path / "config.json").write_text(json.dumps({"log_level": "LOUD"}))
        with pytest.raises(ConfigError):
            load_app_config(tmp_path / "config.json", tmp_path / "config.local.json")


class TestRunManager:
    """Output directories and artifacts"""

    def test_default_directory(self, tmp_path):
        manager = RunManager.for_command(RunConfig(kind="synth2", seed=5), "train", str(tmp_path))
        assert manager.out_dir == tmp_path / "synth2-train-seed5"
        assert manager.out_dir.is_dir()

    def test_explicit_out(self, tmp_path):
        manager = RunManager.for_command(RunConfig(out=str(tmp_path / "mine")), "gen", "ignored")
        assert manager.out_dir == tmp_path / "mine"

    def test_reports_accumulate(self, tmp_path):
        manager = RunManager(tmp_path)
        manager.append_reports([{"probe": "pca"}])
        manager.append_reports([{"probe": "logreg"}, {"probe": "hist"}])
        assert [r["probe"] for r in manager.load_reports()] == ["pca", "logreg", "hist"]
        assert (tmp_path / METRICS).exists()

    def test_config_echo(self, tmp_path):
        manager = RunManager(tmp_path)
        cfg = RunConfig(kind="panel", seed=2)
        manager.write_config_echo(cfg)
        assert (tmp_path / CONFIG_ECHO).read_text() == cfg.echo()

    def test_csv_keeps_full_precision(self, tmp_path):
        manager = RunManager(tmp_path)
        value = 0.1 + 0.2
        manager.write_csv("x.csv", pd.DataFrame({"v": [value]}))
        assert pd.read_csv(tmp_path / "x.csv", float_precision="round_trip")["v"][0] == value

    def test_json_round_trip(self, tmp_path):
        manager = RunManager(tmp_path)
        assert manager.read_json("missing.json") is None
        manager.write_json("d.json", {"b": 1, "a": [1, 2]})
        assert manager.read_json("d.json") == {"a": [1, 2], "b": 1}
