"""Command orchestration: datasets, training, probe fan-out, backtests and gradient checks."""
import asyncio
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from autodiff_core import op_checks
from checkpoint import load_checkpoint, save_checkpoint
from config import AppSettings, RunConfig
from datagen import (
    RawPanel, SampleSet, augment_noise, discretize_quartiles, gen_capm, gen_synth1, gen_synth2,
    load_returns_csv, measures_for_samples, quantile_edges, save_panel_csv, simulate_daily_panel,
    window_quarters,
)
from errors import ConfigError, InsufficientDataError, ShapeError, TrainingError
from nets import ModelBundle, preset_specs
from options_bt import (
    OracleClassifier, ProbeClassifier, RandomClassifier, VolClassifier, midpoints_from_training,
    run_backtest,
)
from probes import (
    classification_score, grid_frame, interpolate, logreg_fit, logreg_probe, market_correlation,
    pca_fit, retrieval_agreement, retrieve, separated_components, swap_accuracy, swap_grid,
    z_histograms,
)
from run_manager import RunManager
from two_step import codes, composite_check, encode, train_two_step

logger = logging.getLogger(__name__)

MANIFEST = "dataset.json"
CHECKPOINT = "model.ckpt"

PROBES = ("pca", "logreg", "score", "hist", "swap", "interp", "retrieve", "market-corr", "suite")
SPACES = ("S", "Z", "X")

# op -> worst relative error allowed; batch norm is the least well-conditioned
GRADCHECK_TOL = 1e-5
GRADCHECK_TOL_BN = 1e-4


@dataclass
class Dataset:
    kind: str
    samples: SampleSet
    catalog: SampleSet
    test: Optional[SampleSet] = None
    raw: Optional[RawPanel] = None
    image_size: int = 32
    skips: Optional[pd.DataFrame] = None


@dataclass(frozen=True)
class ProbeRequest:
    name: str
    space: str = "Z"
    target: Optional[str] = None
    k: Optional[int] = None


ProbeResult = Tuple[Dict, Dict[str, pd.DataFrame]]


class ExperimentRunner:
    def __init__(self, cfg: RunConfig, app: Optional[AppSettings] = None):
        self.cfg = cfg
        self.app = app or AppSettings()

    # -- datasets -----------------------------------------------------------

    def generate(self) -> Dataset:
        cfg = self.cfg
        if cfg.is_synth:
            gen = gen_synth1 if cfg.kind == "synth1" else gen_synth2
            catalog = gen(cfg.synth.image_size, cfg.seed)
            return Dataset(cfg.kind, catalog.draw(cfg.synth.draws, [cfg.seed, 1]), catalog,
                           image_size=cfg.synth.image_size)
        if cfg.kind == "capm":
            _, samples = gen_capm(cfg.capm, cfg.seed)
            return Dataset(cfg.kind, samples, samples)
        if cfg.panel.source == "files":
            if not cfg.panel.returns_path or not cfg.panel.market_path:
                raise ConfigError("panel.source = 'files' needs panel.returns_path and panel.market_path")
            raw = load_returns_csv(cfg.panel.returns_path, cfg.panel.market_path)
        else:
            raw = simulate_daily_panel(cfg.panel.sim, cfg.seed)
        return self._panel_dataset(raw)

    def _panel_dataset(self, raw: RawPanel) -> Dataset:
        cfg = self.cfg
        windows = window_quarters(raw, cfg.panel.calendar)
        samples = augment_noise(windows.train, cfg.panel.noise_sigma, [cfg.seed, 2])
        return Dataset(cfg.kind, samples, windows.train, windows.test, raw, skips=windows.skips)

    def save_dataset(self, ds: Dataset, manager: RunManager) -> None:
        manager.write_json(MANIFEST, {"kind": ds.kind, "image_size": ds.image_size,
                                      "n_classes": ds.catalog.n_classes, "input_dim": ds.catalog.input_dim})
        if ds.raw is not None:
            save_panel_csv(ds.raw, manager.path("returns.csv"), manager.path("market.csv"))
            manager.write_csv("skips.csv", ds.skips)
            return
        ds.catalog.to_csv(manager.path("samples.csv"))
        if ds.catalog.meta is not None:
            manager.write_csv("meta.csv", ds.catalog.meta)

    def load_dataset(self, path) -> Dataset:
        cfg = self.cfg
        root = Path(path)
        if not root.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        manifest = RunManager(root).read_json(MANIFEST)
        if manifest is None:
            raise FileNotFoundError(f"dataset manifest not found: {root / MANIFEST}")
        if manifest["kind"] != cfg.kind:
            raise ConfigError(f"dataset {path} holds {manifest['kind']} data but the run is configured for {cfg.kind}")
        if cfg.kind == "panel":
            return self._panel_dataset(load_returns_csv(root / "returns.csv", root / "market.csv"))
        catalog = SampleSet.from_csv(root / "samples.csv", manifest["n_classes"])
        if (root / "meta.csv").exists():
            catalog = SampleSet(catalog.X, catalog.Y, catalog.n_classes, pd.read_csv(root / "meta.csv"))
        if cfg.is_synth:
            return Dataset(cfg.kind, catalog.draw(cfg.synth.draws, [cfg.seed, 1]), catalog,
                           image_size=manifest["image_size"])
        return Dataset(cfg.kind, catalog, catalog)

    def dataset(self) -> Dataset:
        if self.cfg.dataset:
            return self.load_dataset(self.cfg.dataset)
        return self.generate()

    def load_bundle(self) -> ModelBundle:
        if not self.cfg.checkpoint:
            raise ConfigError("this command needs --checkpoint")
        if not Path(self.cfg.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {self.cfg.checkpoint}")
        return load_checkpoint(self.cfg.checkpoint)

    # -- commands -----------------------------------------------------------

    def gen(self, manager: RunManager) -> Dict:
        ds = self.generate()
        self.save_dataset(ds, manager)
        report = {"command": "gen", "kind": ds.kind, "seed": self.cfg.seed,
                  "n_samples": len(ds.catalog), "input_dim": ds.catalog.input_dim,
                  "n_classes": ds.catalog.n_classes}
        if ds.test is not None:
            report["n_test_samples"] = len(ds.test)
        manager.append_reports([report])
        return report

    def train(self, manager: RunManager) -> Dict:
        cfg = self.cfg
        ds = self.dataset()
        specs = preset_specs(cfg.effective_preset(), cfg.model_dims(ds.samples.input_dim, ds.samples.n_classes))
        train_cfg = cfg.train.model_copy(update={"seed": cfg.seed})
        try:
            bundle, history = train_two_step(ds.samples, specs, train_cfg)
        except TrainingError as exc:
            if exc.history is not None:
                manager.write_csv("stage1_history.csv", exc.history.to_frame(stage=1))
                manager.write_csv("history.csv", exc.history.to_frame(stage=2))
            raise
        save_checkpoint(bundle, manager.path(CHECKPOINT))
        manager.write_csv("stage1_history.csv", history.to_frame(stage=1))
        manager.write_csv("history.csv", history.to_frame(stage=2))
        report = {
            "command": "train", "kind": cfg.kind, "seed": cfg.seed, "preset": cfg.effective_preset(),
            "lam": train_cfg.lam, "ablation": train_cfg.ablation,
            "encdec_updates": history.count("encdec"), "adversary_updates": history.count("adversary"),
            "enc_s_digest": bundle.enc_s.digest(),
            **history.summary,
        }
        manager.append_reports([report])
        return report

    def probe(self, manager: RunManager, name: str, space: str = "Z", target: Optional[str] = None,
              k: Optional[int] = None) -> List[Dict]:
        bundle = self.load_bundle()
        ds = self.dataset()
        if bundle.dims.input_dim != ds.samples.input_dim:
            raise ShapeError(f"checkpoint expects inputs of width {bundle.dims.input_dim}, "
                             f"dataset has width {ds.samples.input_dim}")
        context = ProbeContext(self.cfg, ds, bundle)
        requests = context.suite() if name == "suite" else [ProbeRequest(name, space, target, k)]
        results = self.run_probes(context, requests)
        reports = []
        for report, artifacts in results:
            for filename, frame in artifacts.items():
                manager.write_csv(filename, frame)
            reports.append(report)
        manager.append_reports(reports)
        return reports

    def run_probes(self, context: "ProbeContext", requests: List[ProbeRequest]) -> List[ProbeResult]:
        return asyncio.run(self.run_probes_async(context, requests))

    async def run_probes_async(self, context: "ProbeContext", requests: List[ProbeRequest]) -> List[ProbeResult]:
        """Run probes in parallel; results come back in request order"""
        limit = asyncio.Semaphore(self.app.probe_workers)

        async def run(request):
            async with limit:
                return await asyncio.to_thread(context.run, request)

        return list(await asyncio.gather(*(run(r) for r in requests)))

    def vol_classifier(self, name: str, ds: Dataset) -> VolClassifier:
        cfg = self.cfg
        bt = cfg.backtest
        measures = measures_for_samples(ds.raw, ds.catalog, cfg.panel.measure_window)
        values = measures.vol1 if bt.horizon == 1 else measures.vol5
        known = np.isfinite(values)
        if known.sum() < bt.n_bins:
            raise InsufficientDataError("too few training windows with a measurable future volatility")
        edges, mids = midpoints_from_training(values[known], bt.n_bins)
        if name == "oracle":
            return OracleClassifier(bt.horizon, bt.trading_days)
        if name == "random":
            return RandomClassifier(mids, cfg.seed, bt.horizon, bt.trading_days)
        encoder, scaler = None, None
        if name == "z":
            bundle = self.load_bundle()
            encoder, scaler = bundle.enc_z, bundle.scaler
            if encoder.input_width != ds.catalog.input_dim:
                raise ShapeError(f"checkpoint expects inputs of width {encoder.input_width}, "
                                 f"windows have width {ds.catalog.input_dim}")
        features = ds.catalog.X[known]
        if encoder is not None:
            features = encode(encoder, features if scaler is None else scaler.transform(features))
        model = logreg_fit(features, discretize_quartiles(values[known], edges), cfg.probe.logreg)
        return ProbeClassifier(model, mids, encoder, bt.horizon, cfg.panel.calendar.period_length,
                               bt.trading_days, scaler)

    def backtest(self, manager: RunManager, classifier: str) -> Dict:
        cfg = self.cfg
        if cfg.kind != "panel":
            raise ConfigError(f"backtest needs a daily return panel (kind = 'panel'), not {cfg.kind!r}")
        ds = self.dataset()
        clf = self.vol_classifier(classifier, ds)
        cal = cfg.panel.calendar
        bt_cfg = cfg.backtest.model_copy(update={
            "start": cfg.backtest.start or f"{cal.test_start_year}-01-01",
            "end": cfg.backtest.end or f"{cal.test_end_year}-12-31",
            "seed": cfg.seed,
        })
        result = run_backtest(ds.raw, clf, bt_cfg)
        manager.write_csv("backtest.csv", result.daily)
        manager.write_csv("positions.csv", result.positions_frame())
        manager.write_csv("backtest_skips.csv", result.skips)
        report = {"command": "backtest", "classifier": classifier, "seed": cfg.seed, **result.summary}
        manager.append_reports([report])
        return report

    def gradcheck(self, manager: RunManager, points: int = 10) -> Dict:
        errors = op_checks(self.cfg.seed, points)
        composite = composite_check(self.cfg.seed, points)
        failed = [op for op, err in errors.items()
                  if err > (GRADCHECK_TOL_BN if op.startswith("batchnorm") else GRADCHECK_TOL)]
        if composite > GRADCHECK_TOL_BN:
            failed.append("stock_composite")
        for op in failed:
            logger.error("grad_check failed for %s", op)
        report = {"command": "gradcheck", "seed": self.cfg.seed, "errors": errors,
                  "stock_composite": composite, "failed": failed, "passed": not failed}
        manager.append_reports([report])
        return report


class ProbeContext:
    """Codes and targets shared by every probe of one command.

    Code matrices are computed up front; targets that need the return panel
    are computed once under a lock, so probes can run on worker threads.
    """

    def __init__(self, cfg: RunConfig, ds: Dataset, bundle: ModelBundle):
        self.cfg = cfg
        self.ds = ds
        self.bundle = bundle
        self.probe_cfg = cfg.probe.model_copy(update={"seed": cfg.seed})
        self._lock = threading.Lock()
        self._measures = {}
        self.codes = {"samples": self._encode(ds.samples.X), "catalog": self._encode(ds.catalog.X)}
        if ds.test is not None:
            self.codes["test"] = self._encode(ds.test.X)

    def _encode(self, X: np.ndarray) -> Dict[str, np.ndarray]:
        S, Z = codes(self.bundle, X)
        return {"S": S, "Z": Z, "X": X}

    def default_target(self) -> str:
        if self.cfg.is_synth:
            return "label"
        return "beta" if self.cfg.kind == "capm" else "vol1"

    def suite(self) -> List[ProbeRequest]:
        kind = self.cfg.kind
        if self.cfg.is_synth:
            return [ProbeRequest("pca", "S"), ProbeRequest("pca", "Z"),
                    ProbeRequest("score", "S", "label"), ProbeRequest("score", "Z", "label"),
                    ProbeRequest("score", "Z", "latent"), ProbeRequest("hist", "Z", "latent"),
                    ProbeRequest("swap"), ProbeRequest("interp"), ProbeRequest("retrieve", "Z")]
        targets = ("beta", "er_m") if kind == "capm" else ("beta", "rho", "vol1", "vol5")
        requests = [ProbeRequest("pca", "Z")]
        requests += [ProbeRequest("logreg", space, t) for t in targets for space in SPACES]
        return requests + [ProbeRequest("market-corr", "S")]

    # -- targets ------------------------------------------------------------

    def _synth_latent(self, meta: pd.DataFrame, name: str) -> np.ndarray:
        if name == "latent":
            if "background" in meta:
                return meta["background"].to_numpy()
            return 2 * meta["upper"].to_numpy() + meta["lower"].to_numpy()
        if name not in meta:
            raise ConfigError(f"unknown target {name!r} for {self.cfg.kind}")
        return meta[name].to_numpy()

    def _panel_measures(self, which: str):
        with self._lock:
            if which not in self._measures:
                data = self.ds.catalog if which == "train" else self.ds.test
                self._measures[which] = measures_for_samples(self.ds.raw, data, self.cfg.panel.measure_window)
            return self._measures[which]

    def probe_set(self, space: str, target: str):
        """Features, integer classes and an optional fixed (train, test) split for one probe."""
        if space not in SPACES:
            raise ConfigError(f"unknown space {space!r}, expected one of {', '.join(SPACES)}")
        ds = self.ds
        if target == "label":
            return self.codes["samples"][space], ds.samples.Y, None
        if self.cfg.is_synth:
            return self.codes["samples"][space], self._synth_latent(ds.samples.meta, target), None
        if self.cfg.kind == "capm":
            if target not in ("beta", "er_m"):
                raise ConfigError(f"unknown target {target!r} for capm, expected label, beta or er_m")
            values = ds.samples.meta[target].to_numpy()
            n_bins = 4 if target == "beta" else 3
            return self.codes["samples"][space], discretize_quartiles(values, quantile_edges(values, n_bins)), None
        if target not in ("beta", "rho", "vol1", "vol5"):
            raise ConfigError(f"unknown target {target!r} for panel, expected label, beta, rho, vol1 or vol5")
        train_vals = self._panel_measures("train").get(target)
        edges = quantile_edges(train_vals, 4)
        train_ok = np.flatnonzero(np.isfinite(train_vals))
        train_feats = self.codes["catalog"][space][train_ok]
        train_cls = discretize_quartiles(train_vals[train_ok], edges)
        if ds.test is None or len(ds.test) == 0:
            return train_feats, train_cls, None
        test_vals = self._panel_measures("test").get(target)
        test_ok = np.flatnonzero(np.isfinite(test_vals))
        features = np.concatenate([train_feats, self.codes["test"][space][test_ok]])
        classes = np.concatenate([train_cls, discretize_quartiles(test_vals[test_ok], edges)])
        split = (np.arange(len(train_ok)), np.arange(len(train_ok), len(features)))
        return features, classes, split

    # -- probes -------------------------------------------------------------

    def run(self, request: ProbeRequest) -> ProbeResult:
        handlers: Dict[str, Callable[[ProbeRequest], ProbeResult]] = {
            "pca": self._pca, "logreg": self._logreg, "score": self._score, "hist": self._hist,
            "swap": self._swap, "interp": self._interp, "retrieve": self._retrieve,
            "market-corr": self._market_corr,
        }
        if request.name not in handlers:
            raise ConfigError(f"unknown probe {request.name!r}, expected one of {', '.join(PROBES)}")
        return handlers[request.name](request)

    def _pca(self, req: ProbeRequest) -> ProbeResult:
        feats = self.codes["catalog"][req.space]
        k = min(req.k or feats.shape[1], feats.shape[1])
        model = pca_fit(feats, k)
        return {"probe": "pca", "space": req.space, "k": k, "n_samples": len(feats),
                "ratios": [float(r) for r in model.ratios]}, {}

    def _logreg(self, req: ProbeRequest) -> ProbeResult:
        target = req.target or self.default_target()
        features, classes, split = self.probe_set(req.space, target)
        report = logreg_probe(features, classes, self.probe_cfg, split, req.space, target)
        return report.to_dict(), {}

    def _score(self, req: ProbeRequest) -> ProbeResult:
        target = req.target or self.default_target()
        features, classes, split = self.probe_set(req.space, target)
        n_classes = self.ds.samples.n_classes if target == "label" else int(classes.max()) + 1
        report = classification_score(features, classes, self.probe_cfg, split, n_classes, req.space, target)
        return report.to_dict(), {}

    def _hist(self, req: ProbeRequest) -> ProbeResult:
        target = req.target or ("latent" if self.cfg.is_synth else self.default_target())
        features, classes, _ = self.probe_set(req.space, target)
        frame = z_histograms(features, classes, self.probe_cfg.hist_bins)
        separated = separated_components(features, classes)
        return {"probe": "hist", "space": req.space, "target": target,
                "separated_components": separated}, {"histograms.csv": frame}

    def _sources(self, n: int) -> np.ndarray:
        return np.arange(min(n, len(self.ds.catalog)))

    def _swap(self, req: ProbeRequest) -> ProbeResult:
        idx = self._sources(req.k or self.probe_cfg.swap_sources)
        S, Z = self.codes["catalog"]["S"][idx], self.codes["catalog"]["Z"][idx]
        grid = self.bundle.to_data_space(swap_grid(self.bundle.decoder, S, Z))
        k = len(idx)
        index = pd.DataFrame({"row": np.repeat(np.arange(k), k), "col": np.tile(np.arange(k), k),
                              "s_source": np.repeat(idx, k), "z_source": np.tile(idx, k)})
        report = {"probe": "swap", "k": k}
        if self.cfg.is_synth:
            meta = self.ds.catalog.meta.iloc[idx]
            cols = ["background"] if self.cfg.kind == "synth1" else ["upper", "lower"]
            report["swap_accuracy"] = swap_accuracy(grid, meta["position"].to_numpy(), meta[cols].to_numpy(),
                                                    self.ds.image_size, self.cfg.kind)
        return report, {"swap_grid.csv": grid_frame(grid), "swap_index.csv": index}

    def _interp(self, req: ProbeRequest) -> ProbeResult:
        if len(self.ds.catalog) < 2:
            raise InsufficientDataError("interpolation needs two source samples")
        S, Z = self.codes["catalog"]["S"], self.codes["catalog"]["Z"]
        steps = self.probe_cfg.steps
        grid = self.bundle.to_data_space(interpolate(self.bundle.decoder, (S[0], Z[0]), (S[1], Z[1]), steps))
        return {"probe": "interp", "steps": steps, "sources": [0, 1]}, {"interp_grid.csv": grid_frame(grid)}

    def _retrieve(self, req: ProbeRequest) -> ProbeResult:
        feats = self.codes["catalog"][req.space]
        k = req.k or self.probe_cfg.k
        q = self.probe_cfg.query_index
        neighbors = retrieve(feats, q, k)
        report = {"probe": "retrieve", "space": req.space, "query_index": q, "k": k,
                  "neighbors": [int(i) for i in neighbors]}
        if self.cfg.is_synth:
            meta = self.ds.catalog.meta
            groups = meta["position"].to_numpy() if req.space == "S" else self._synth_latent(meta, "latent")
            report["agreement"] = retrieval_agreement(feats, groups, k)
        return report, {}

    def _market_corr(self, req: ProbeRequest) -> ProbeResult:
        if self.cfg.is_synth:
            raise ConfigError("market-corr needs market data (kind capm or panel)")
        if self.cfg.kind == "capm":
            data, key = self.ds.samples, "samples"
            periods = data.meta["period"].to_numpy()
            days = self.cfg.capm.days
        else:
            use_test = self.ds.test is not None and len(self.ds.test) > 0
            data, key = (self.ds.test, "test") if use_test else (self.ds.catalog, "catalog")
            periods = data.Y
            days = self.cfg.panel.calendar.period_length
        market = data.X[:, days:].mean(axis=1)
        r = market_correlation(self.codes[key]["S"], periods, market)
        return {"probe": "market-corr", "space": "S", "abs_r": r, "n_periods": int(len(np.unique(periods)))}, {}
