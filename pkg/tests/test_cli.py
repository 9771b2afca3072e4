import json

import pandas as pd
import pytest

from main import build_parser, main, overrides_from_args

TINY_SYNTH = """
kind = "synth1"
seed = 1

[synth]
image_size = 20
draws = 40

[train]
batch_size = 16
stage1_epochs = 1
stage2_iterations = 2

[probe]
score_epochs = 1
k = 3
"""

SMALL_PANEL = """
kind = "panel"
seed = 2

[panel.sim]
start = "2008-01-01"
end = "2011-12-31"
n_tickers = 30
late_listing_fraction = 0.0

[panel.calendar]
train_start_year = 2008
train_end_year = 2009
test_start_year = 2010
test_end_year = 2011
"""


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write(path, text):
    path.write_text(text)
    return str(path)


def reports(out_dir):
    with open(out_dir / "metrics.json") as f:
        return json.load(f)["reports"]


class TestParser:
    """Argument parsing"""

    def test_overrides(self):
        args = build_parser().parse_args(["gen", "capm", "--periods", "10", "--assets", "50", "--seed", "7"])
        overrides = overrides_from_args(args)
        assert overrides["capm.n_periods"] == 10
        assert overrides["capm.n_assets"] == 50
        assert overrides["seed"] == 7
        assert overrides["train.lam"] is None

    def test_lambda_flag(self):
        args = build_parser().parse_args(["train", "--lambda", "0"])
        assert args.lam == 0.0

    def test_unknown_probe(self, capsys):
        assert main(["probe", "tsne"]) == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_help(self):
        assert main(["--help"]) == 0


class TestGen:
    """Dataset generation"""

    def test_synth1(self, workdir):
        out = workdir / "s1"
        assert main(["gen", "synth1", "--seed", "7", "--out", str(out)]) == 0
        assert len(pd.read_csv(out / "samples.csv")) == 20
        assert (out / "config.echo.json").exists()
        assert reports(out)[0]["n_classes"] == 10

    def test_capm(self, workdir):
        out = workdir / "capm"
        assert main(["gen", "capm", "--periods", "10", "--assets", "50", "--out", str(out)]) == 0
        samples = pd.read_csv(out / "samples.csv")
        assert len(samples) == 500
        assert samples.shape[1] == 2 + 100

    def test_same_seed_same_bytes(self, workdir):
        for name in ("a", "b"):
            assert main(["gen", "synth2", "--seed", "3", "--out", str(workdir / name)]) == 0
        for filename in ("samples.csv", "meta.csv"):
            assert (workdir / "a" / filename).read_bytes() == (workdir / "b" / filename).read_bytes()

    def test_default_output_directory(self, workdir):
        assert main(["gen", "synth1", "--seed", "4"]) == 0
        assert (workdir / "runs" / "synth1-gen-seed4" / "samples.csv").exists()


class TestErrors:
    """Exit codes and messages"""

    def test_missing_dataset(self, workdir, capsys):
        code = main(["train", "--kind", "synth1", "--dataset", str(workdir / "nowhere"), "--out", str(workdir / "t")])
        assert code == 2
        assert "nowhere" in capsys.readouterr().err

    def test_backtest_z_needs_checkpoint(self, workdir):
        assert main(["backtest", "--kind", "panel", "--out", str(workdir / "bt")]) == 2

    def test_probe_needs_checkpoint(self, workdir):
        assert main(["probe", "pca", "--kind", "synth1", "--out", str(workdir / "p")]) == 2

    def test_bad_config_file(self, workdir):
        path = write(workdir / "bad.toml", "nonsense = 1\n")
        assert main(["gen", "synth1", "--config", path, "--out", str(workdir / "g")]) == 2

    def test_backtest_needs_panel(self, workdir):
        assert main(["backtest", "--kind", "capm", "--classifier", "oracle", "--out", str(workdir / "bt")]) == 2

    def test_dataset_kind_mismatch(self, workdir):
        assert main(["gen", "synth1", "--out", str(workdir / "s1")]) == 0
        assert main(["train", "--kind", "synth2", "--dataset", str(workdir / "s1"), "--out", str(workdir / "t")]) == 2


class TestGradcheck:
    """gradcheck command"""

    def test_passes(self, workdir):
        out = workdir / "gc"
        assert main(["gradcheck", "--out", str(out)]) == 0
        report = reports(out)[0]
        assert report["passed"]
        assert report["failed"] == []


class TestTrainAndProbe:
    """Training and probing a tiny synthetic model"""

    @pytest.fixture
    def config(self, workdir):
        return write(workdir / "tiny.toml", TINY_SYNTH)

    def test_train_writes_artifacts(self, workdir, config):
        out = workdir / "train"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        assert (out / "model.ckpt").exists()
        history = pd.read_csv(out / "history.csv")
        assert set(history["phase"]) == {"encdec", "adversary"}
        report = reports(out)[0]
        assert report["encdec_updates"] == 2
        assert report["ablation"] is False

    def test_lambda_zero_is_ablation(self, workdir, config):
        out = workdir / "ablation"
        assert main(["train", "--config", config, "--lambda", "0", "--out", str(out)]) == 0
        report = reports(out)[0]
        assert report["ablation"] is True
        assert report["lam"] == 0.0

    def test_training_is_reproducible(self, workdir, config):
        for name in ("a", "b"):
            assert main(["train", "--config", config, "--out", str(workdir / name)]) == 0
        assert reports(workdir / "a")[0]["enc_s_digest"] == reports(workdir / "b")[0]["enc_s_digest"]

    def test_probes(self, workdir, config):
        out = workdir / "train"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        ckpt = str(out / "model.ckpt")

        pca_out = workdir / "pca"
        assert main(["probe", "pca", "--config", config, "--checkpoint", ckpt, "--space", "S",
                     "--out", str(pca_out)]) == 0
        report = reports(pca_out)[0]
        assert report["probe"] == "pca"
        assert len(report["ratios"]) == 4

        suite_out = workdir / "suite"
        assert main(["probe", "suite", "--config", config, "--checkpoint", ckpt, "--out", str(suite_out)]) == 0
        names = [r["probe"] for r in reports(suite_out)]
        assert names == ["pca", "pca", "score", "score", "score", "hist", "swap", "interp", "retrieve"]
        assert (suite_out / "swap_grid.csv").exists()
        assert (suite_out / "histograms.csv").exists()
        assert len(pd.read_csv(suite_out / "interp_grid.csv")) == 25

    def test_market_corr_refuses_images(self, workdir, config):
        out = workdir / "train"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        code = main(["probe", "market-corr", "--config", config, "--checkpoint", str(out / "model.ckpt"),
                     "--out", str(workdir / "mc")])
        assert code == 2


class TestBacktest:
    """backtest command on a simulated panel"""

    @pytest.fixture
    def config(self, workdir):
        return write(workdir / "panel.toml", SMALL_PANEL)

    def test_gen_panel(self, workdir, config):
        out = workdir / "panel"
        assert main(["gen", "panel", "--config", config, "--out", str(out)]) == 0
        for name in ("returns.csv", "market.csv", "skips.csv", "dataset.json"):
            assert (out / name).exists()
        report = reports(out)[0]
        assert report["n_classes"] == 8
        assert report["n_test_samples"] > 0

    @pytest.mark.parametrize("classifier", ["oracle", "random", "x"])
    def test_classifiers(self, workdir, config, classifier):
        out = workdir / classifier
        assert main(["backtest", "--config", config, "--classifier", classifier, "--out", str(out)]) == 0
        daily = pd.read_csv(out / "backtest.csv")
        assert daily["date"].min() >= "2010-01-01"
        report = reports(out)[0]
        assert report["classifier"] == classifier
        assert report["n_days"] == len(daily) > 0
