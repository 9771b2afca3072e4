import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import pytest

from config import RunConfig, load_run_config
from datagen import CapmConfig, PanelSimConfig, gen_capm, simulate_daily_panel
from experiment_runner import ExperimentRunner, ProbeContext
from nets import ModelDims, build_bundle, preset_specs, synth_specs
from two_step import TrainConfig, TrainHistory, train_two_step


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dims():
    return ModelDims(input_dim=12, s_dim=3, z_dim=4, n_classes=3)


@pytest.fixture
def small_bundle(small_dims):
    return build_bundle(synth_specs(small_dims), seed=5)


@pytest.fixture
def quick_train():
    return TrainConfig(stage1_epochs=2, stage2_iterations=3, batch_size=16, log_every=1000)


@pytest.fixture
def small_capm():
    cfg = CapmConfig(n_periods=6, n_assets=20)
    return gen_capm(cfg, seed=3)


@pytest.fixture(scope="session")
def small_panel():
    """Two and a half years of simulated daily returns for 30 tickers, nobody listing late."""
    cfg = PanelSimConfig(start="2008-01-01", end="2010-06-30", n_tickers=30, late_listing_fraction=0.0)
    return simulate_daily_panel(cfg, seed=11)


CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


@dataclass(frozen=True)
class ShippedRun:
    cfg: RunConfig
    context: ProbeContext
    history: TrainHistory


@pytest.fixture(scope="session")
def shipped_run():
    """Train from a shipped experiment file; each (name, seed, overrides) is trained once per session."""

    @functools.lru_cache(maxsize=None)
    def run(name: str, seed: int, overrides: Tuple[Tuple[str, object], ...] = ()) -> ShippedRun:
        cfg = load_run_config(str(CONFIG_DIR / f"{name}.toml"), {"seed": seed, **dict(overrides)})
        ds = ExperimentRunner(cfg).generate()
        specs = preset_specs(cfg.effective_preset(), cfg.model_dims(ds.samples.input_dim, ds.samples.n_classes))
        bundle, history = train_two_step(ds.samples, specs, cfg.train.model_copy(update={"seed": seed}))
        return ShippedRun(cfg, ProbeContext(cfg, ds, bundle), history)

    return run
