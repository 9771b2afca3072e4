"""Datasets: synthetic rectangle images, CAPM market panels and daily return panels.

Everything a model is trained or probed on is a :class:`SampleSet`. Return
panels (loaded from ``returns.csv``/``market.csv`` or simulated) are held as a
:class:`RawPanel` and cut into per-quarter windows of 50 stock returns followed
by the 50 market returns of the same days.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from errors import DataFormatError, InsufficientDataError, ShapeError
from parsers import parser_for

logger = logging.getLogger(__name__)

N_POSITIONS = 10
GRAY = 0.5


@dataclass
class SampleSet:
    X: np.ndarray
    Y: np.ndarray
    n_classes: int
    meta: Optional[pd.DataFrame] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ShapeError(f"X must be a matrix, got shape {self.X.shape}")
        if self.Y.shape != (self.X.shape[0],):
            raise ShapeError(f"Y has shape {self.Y.shape}, expected ({self.X.shape[0]},)")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be positive, got {self.n_classes}")
        if not np.isfinite(self.X).all():
            raise DataFormatError("sample matrix contains non-finite values")
        if len(self.Y) and (self.Y.min() < 0 or self.Y.max() >= self.n_classes):
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")
        if self.meta is not None:
            if len(self.meta) != len(self.Y):
                raise ShapeError(f"meta has {len(self.meta)} records for {len(self.Y)} samples")
            self.meta = self.meta.reset_index(drop=True)

    def __len__(self) -> int:
        return len(self.Y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        meta = None if self.meta is None else self.meta.iloc[idx].reset_index(drop=True)
        return SampleSet(self.X[idx], self.Y[idx], self.n_classes, meta)

    def draw(self, n: int, seed) -> "SampleSet":
        """``n`` samples drawn with replacement, every row equally likely."""
        if len(self) == 0:
            raise InsufficientDataError("cannot draw from an empty sample set")
        rng = np.random.default_rng(seed)
        return self.subset(rng.integers(0, len(self), size=n))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=[f"x_{j}" for j in range(self.input_dim)])
        df.insert(0, "label", self.Y)
        df.insert(0, "sample_id", np.arange(len(self)))
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, n_classes: Optional[int] = None) -> "SampleSet":
        df = pd.read_csv(path)
        x_cols = [c for c in df.columns if c.startswith("x_")]
        if "label" not in df.columns or not x_cols:
            raise DataFormatError(f"{path}: expected columns sample_id,label,x_0..x_(d-1)")
        Y = df["label"].to_numpy(dtype=np.int64)
        n = n_classes if n_classes is not None else int(Y.max()) + 1 if len(Y) else 1
        return cls(df[x_cols].to_numpy(dtype=np.float64), Y, n)


# -- synthetic rectangles ----------------------------------------------------

@dataclass(frozen=True)
class SynthGeometry:
    size: int
    height: int
    width: int
    left: int

    def top(self, position: int) -> int:
        return 1 + self.height * position

    def rect_mask(self, position: int) -> np.ndarray:
        mask = np.zeros((self.size, self.size), dtype=bool)
        top = self.top(position)
        mask[top:top + self.height, self.left:self.left + self.width] = True
        return mask


def synth_geometry(image_size: int) -> SynthGeometry:
    """Ten vertically stacked, disjoint rectangle positions, horizontally centered."""
    if image_size < 20:
        raise ShapeError(f"image_size {image_size} is too small: 10 distinct rectangle positions need >= 20 rows")
    height = (image_size - 2) // 10
    width = 5 * image_size // 8
    geom = SynthGeometry(image_size, height, width, (image_size - width) // 2)
    if geom.top(N_POSITIONS - 1) + height > image_size:
        raise ShapeError(f"rectangle positions overflow a {image_size}-pixel image")
    return geom


def _render(geom: SynthGeometry, position: int, upper: float, lower: float) -> np.ndarray:
    img = np.empty((geom.size, geom.size))
    half = geom.size // 2
    img[:half] = upper
    img[half:] = lower
    img[geom.rect_mask(position)] = GRAY
    return img.reshape(-1)


def _synth(rows: List[Tuple[int, float, float]], geom: SynthGeometry, seed,
           meta_cols: Dict[str, List[int]]) -> SampleSet:
    X = np.stack([_render(geom, pos, up, lo) for pos, up, lo in rows])
    Y = np.array([pos for pos, _, _ in rows])
    meta = pd.DataFrame({"position": Y, **meta_cols})
    order = np.random.default_rng(seed).permutation(len(rows))
    return SampleSet(X, Y, N_POSITIONS, meta).subset(order)


def gen_synth1(image_size: int = 32, seed=0) -> SampleSet:
    """All 20 images: 10 rectangle positions on a black or white background."""
    geom = synth_geometry(image_size)
    rows, background = [], []
    for pos in range(N_POSITIONS):
        for bg in (0, 1):
            rows.append((pos, float(bg), float(bg)))
            background.append(bg)
    return _synth(rows, geom, seed, {"background": background})


def gen_synth2(image_size: int = 32, seed=0) -> SampleSet:
    """All 40 images: 10 positions x independent upper-half and lower-half backgrounds."""
    geom = synth_geometry(image_size)
    rows, upper, lower = [], [], []
    for pos in range(N_POSITIONS):
        for up in (0, 1):
            for lo in (0, 1):
                rows.append((pos, float(up), float(lo)))
                upper.append(up)
                lower.append(lo)
    return _synth(rows, geom, seed, {"upper": upper, "lower": lower})


def read_synth_image(pixels: np.ndarray, image_size: int = 32, kind: str = "synth1") -> Tuple[int, Tuple[int, ...]]:
    """Decode a (possibly reconstructed) image back to its position and background bits.

    The position is the one whose rectangle pixels are closest to gray; each
    background bit is read from the leftmost column, which no rectangle covers.
    """
    geom = synth_geometry(image_size)
    img = np.asarray(pixels, dtype=np.float64).reshape(image_size, image_size)
    scores = [np.mean(np.abs(img[geom.rect_mask(p)] - GRAY)) for p in range(N_POSITIONS)]
    position = int(np.argmin(scores))
    half = image_size // 2
    if kind == "synth1":
        return position, (int(img[:, 0].mean() > GRAY),)
    if kind == "synth2":
        return position, (int(img[:half, 0].mean() > GRAY), int(img[half:, 0].mean() > GRAY))
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


# -- CAPM panels -------------------------------------------------------------

class CapmConfig(BaseModel):
    n_periods: int = Field(150, ge=1)
    days: int = Field(50, ge=2)
    n_assets: int = Field(1500, ge=1)
    rf_low: float = Field(0.0025, gt=0.0)
    rf_high: float = Field(0.03, gt=0.0)
    premium_noise: float = Field(0.04, ge=0.0)
    market_noise: float = Field(0.0005, ge=0.0)
    idio_noise: float = Field(0.0005, ge=0.0)
    beta_low: float = -1.0
    beta_high: float = 3.0
    augment_sigma: float = Field(0.0005, ge=0.0)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.rf_low >= self.rf_high:
            raise ValueError(f"rf_low ({self.rf_low}) must be below rf_high ({self.rf_high})")
        if self.beta_low > self.beta_high:
            raise ValueError(f"beta_low ({self.beta_low}) exceeds beta_high ({self.beta_high})")
        return self


@dataclass
class MarketPanel:
    """Per period: ``rf`` (P,), ``er_m`` (P,), daily ``r_m`` (P, D); per asset ``betas`` (P, A) and ``returns`` (P, A, D)."""

    rf: np.ndarray
    er_m: np.ndarray
    r_m: np.ndarray
    betas: np.ndarray
    returns: np.ndarray

    @property
    def n_periods(self) -> int:
        return self.r_m.shape[0]

    @property
    def days(self) -> int:
        return self.r_m.shape[1]

    @property
    def n_assets(self) -> int:
        return self.betas.shape[1]

    def labels(self) -> np.ndarray:
        return np.arange(self.n_periods)


def _capm_period(cfg: CapmConfig, seed, period: int):
    rng = np.random.default_rng([seed, period])
    D = cfg.days
    rf = rng.uniform(cfg.rf_low, cfg.rf_high)
    er_m = rf / D + (cfg.premium_noise / D) * rng.standard_normal()
    r_m = er_m + cfg.market_noise * rng.standard_normal(D)
    betas = rng.uniform(cfg.beta_low, cfg.beta_high, size=cfg.n_assets)
    eps = cfg.idio_noise * rng.standard_normal((cfg.n_assets, D))
    # R_f/D + beta (R_m - R_f/D), written so beta = 1 reproduces R_m exactly
    returns = (1.0 - betas)[:, None] * (rf / D) + betas[:, None] * r_m[None, :] + eps
    x = np.concatenate([returns, np.broadcast_to(r_m, (cfg.n_assets, D))], axis=1)
    if cfg.augment_sigma > 0:
        x = x + cfg.augment_sigma * rng.standard_normal(x.shape)
    return rf, er_m, r_m, betas, returns, x


def gen_capm(cfg: Optional[CapmConfig] = None, seed=0) -> Tuple[MarketPanel, SampleSet]:
    """Simulate the CAPM world; sample rows are asset returns followed by market returns, labeled by period."""
    cfg = cfg or CapmConfig()
    parts = [_capm_period(cfg, seed, p) for p in range(cfg.n_periods)]
    rf, er_m, r_m, betas, returns, xs = zip(*parts)
    panel = MarketPanel(np.array(rf), np.array(er_m), np.stack(r_m), np.stack(betas), np.stack(returns))

    A = cfg.n_assets
    periods = np.repeat(np.arange(cfg.n_periods), A)
    meta = pd.DataFrame({
        "period": periods,
        "asset": np.tile(np.arange(A), cfg.n_periods),
        "beta": panel.betas.reshape(-1),
        "er_m": panel.er_m[periods],
        "rf": panel.rf[periods],
    })
    samples = SampleSet(np.concatenate(xs, axis=0), periods, cfg.n_periods, meta)
    logger.info("Generated CAPM panel: %d periods x %d assets", cfg.n_periods, A)
    return panel, samples


# -- raw daily panels --------------------------------------------------------

@dataclass
class RawPanel:
    """Wide daily returns (dates x tickers, NaN where a ticker has no return) plus the market series."""

    returns: pd.DataFrame
    market: pd.Series
    missing: pd.Series = None

    def __post_init__(self):
        if not self.returns.index.equals(self.market.index):
            raise DataFormatError("stock and market returns are indexed by different dates")
        if self.missing is None:
            self.missing = self.returns.isna().sum().astype(np.int64)

    @property
    def tickers(self) -> List[str]:
        return list(self.returns.columns)

    def __len__(self) -> int:
        return len(self.market)


def ticker_names(n: int, prefix: str = "A") -> List[str]:
    return [f"{prefix}{i:04d}" for i in range(n)]


def capm_to_raw(panel: MarketPanel, start: str = "2000-01-03") -> RawPanel:
    """Lay the CAPM periods on consecutive business days; asset ``a`` becomes ticker ``A{a:04d}``."""
    dates = pd.bdate_range(start, periods=panel.n_periods * panel.days, name="date")
    wide = panel.returns.transpose(0, 2, 1).reshape(-1, panel.n_assets)
    returns = pd.DataFrame(wide, index=dates, columns=pd.Index(ticker_names(panel.n_assets), name="ticker"))
    return RawPanel(returns, pd.Series(panel.r_m.reshape(-1), index=dates, name="ret"))


def save_panel_csv(raw: RawPanel, returns_path, market_path) -> None:
    """Write the ``date,ticker,ret`` and ``date,ret`` tables; missing returns are omitted."""
    long = (raw.returns.rename_axis("date").rename_axis("ticker", axis=1).reset_index()
            .melt(id_vars="date", var_name="ticker", value_name="ret")
            .dropna(subset=["ret"])
            .sort_values(["date", "ticker"], kind="stable"))
    long["date"] = long["date"].dt.strftime("%Y-%m-%d")
    long.to_csv(returns_path, index=False, float_format="%.17g")
    market = raw.market.rename("ret").rename_axis("date").reset_index()
    market.columns = ["date", "ret"]
    market["date"] = market["date"].dt.strftime("%Y-%m-%d")
    market.to_csv(market_path, index=False, float_format="%.17g")
    logger.info("Wrote %s and %s", returns_path, market_path)


def _parse_cells(df: pd.DataFrame, path, numeric: Sequence[str]) -> pd.DataFrame:
    out = df.copy()
    dates = pd.to_datetime(df["date"].str.strip(), format="ISO8601", errors="coerce")
    bad = dates.isna()
    for col in numeric:
        out[col] = pd.to_numeric(df[col].str.strip(), errors="coerce")
        bad |= ~np.isfinite(out[col].to_numpy(dtype=np.float64))
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError(f"{path}: line {i + 2}: cannot parse row {df.iloc[i].tolist()}")
    out["date"] = dates.dt.normalize()
    return out


def load_returns_csv(returns_path, market_path) -> RawPanel:
    """Load a daily return panel; stock dates must be a subset of the market calendar."""
    rows = _parse_cells(parser_for(returns_path).parse(returns_path, ["date", "ticker", "ret"]),
                        returns_path, ["ret"])
    market = _parse_cells(parser_for(market_path).parse(market_path, ["date", "ret"]),
                          market_path, ["ret"])

    if market["date"].duplicated().any():
        i = int(np.flatnonzero(market["date"].duplicated().to_numpy())[0])
        raise DataFormatError(f"{market_path}: line {i + 2}: duplicate date")
    dup = rows.duplicated(["date", "ticker"])
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataFormatError(f"{returns_path}: line {i + 2}: duplicate date/ticker pair")

    market_series = market.set_index("date")["ret"].sort_index()
    market_series.index.name = "date"
    stray = ~rows["date"].isin(market_series.index)
    if stray.any():
        i = int(np.flatnonzero(stray.to_numpy())[0])
        raise DataFormatError(f"{returns_path}: line {i + 2}: date {rows['date'].iloc[i].date()} "
                              f"is not in the market calendar {market_path}")

    rows["ticker"] = rows["ticker"].str.strip()
    wide = rows.pivot(index="date", columns="ticker", values="ret").reindex(market_series.index)
    wide.columns.name = "ticker"
    raw = RawPanel(wide.astype(np.float64), market_series.astype(np.float64))
    logger.info("Loaded %d tickers over %d days (%d missing ticker-days)",
                len(raw.tickers), len(raw), int(raw.missing.sum()))
    return raw


class PanelSimConfig(BaseModel):
    start: str = "1976-01-01"
    end: str = "2016-12-31"
    n_tickers: int = Field(60, ge=1)
    rf_low: float = Field(0.0025, gt=0.0)
    rf_high: float = Field(0.03, gt=0.0)
    premium_noise: float = Field(0.04, ge=0.0)
    market_noise: float = Field(0.01, ge=0.0)
    beta_low: float = 0.0
    beta_high: float = 2.0
    idio_vol_low: float = Field(0.005, ge=0.0)
    idio_vol_high: float = Field(0.03, ge=0.0)
    late_listing_fraction: float = Field(0.1, ge=0.0, le=1.0)
    quarter_days: int = Field(63, ge=1)


def simulate_daily_panel(cfg: Optional[PanelSimConfig] = None, seed=0) -> RawPanel:
    """CAPM-driven daily panel on a business-day calendar.

    R_f and E[R_m] are redrawn each quarter, betas each year and idiosyncratic
    volatility per ticker each quarter. A fraction of tickers list late and
    have no returns before their listing date.
    """
    cfg = cfg or PanelSimConfig()
    dates = pd.bdate_range(cfg.start, cfg.end, name="date")
    n_days, T = len(dates), cfg.n_tickers
    rng = np.random.default_rng([seed, 0])
    quarter = (dates.year * 4 + (dates.month - 1) // 3).to_numpy()
    year = dates.year.to_numpy()
    q_ids, q_idx = np.unique(quarter, return_inverse=True)
    y_ids, y_idx = np.unique(year, return_inverse=True)
    D = cfg.quarter_days

    rf = rng.uniform(cfg.rf_low, cfg.rf_high, size=len(q_ids))
    er_m = rf / D + (cfg.premium_noise / D) * rng.standard_normal(len(q_ids))
    market = er_m[q_idx] + cfg.market_noise * rng.standard_normal(n_days)
    betas = rng.uniform(cfg.beta_low, cfg.beta_high, size=(len(y_ids), T))
    idio = rng.uniform(cfg.idio_vol_low, cfg.idio_vol_high, size=(len(q_ids), T))

    rf_day = (rf / D)[q_idx][:, None]
    b = betas[y_idx]
    returns = rf_day + b * (market[:, None] - rf_day) + idio[q_idx] * rng.standard_normal((n_days, T))

    late = rng.random(T) < cfg.late_listing_fraction
    listing = rng.integers(0, n_days, size=T)
    for t in np.flatnonzero(late):
        returns[:listing[t], t] = np.nan

    frame = pd.DataFrame(returns, index=dates, columns=pd.Index(ticker_names(T, "T"), name="ticker"))
    return RawPanel(frame, pd.Series(market, index=dates, name="ret"))


# -- quarter windows ---------------------------------------------------------

class CalendarConfig(BaseModel):
    train_start_year: int = 1976
    train_end_year: int = 2009
    test_start_year: int = 2010
    test_end_year: int = 2016
    period_length: int = Field(50, ge=2)

    @model_validator(mode="after")
    def _check_years(self):
        if self.train_start_year > self.train_end_year:
            raise ValueError("train_start_year is after train_end_year")
        if self.test_start_year > self.test_end_year:
            raise ValueError("test_start_year is after test_end_year")
        return self


@dataclass
class QuarterWindows:
    train: SampleSet
    test: SampleSet
    skips: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["year", "quarter", "ticker", "reason"]))


def _windows_for_span(raw: RawPanel, first_year: int, last_year: int, cal: CalendarConfig,
                      skips: List[dict]) -> SampleSet:
    L = cal.period_length
    dates = raw.market.index
    stocks = raw.returns.to_numpy(dtype=np.float64)
    market = raw.market.to_numpy(dtype=np.float64)
    tickers = np.array(raw.tickers, dtype=object)

    xs, labels, metas = [], [], []
    for year in range(first_year, last_year + 1):
        for q in range(1, 5):
            rows = np.flatnonzero((dates.year == year) & ((dates.month - 1) // 3 + 1 == q))
            if len(rows) == 0:
                continue
            if len(rows) < L:
                logger.warning("Skipping %dQ%d: %d trading days < %d", year, q, len(rows), L)
                skips.append({"year": year, "quarter": q, "ticker": None, "reason": f"{len(rows)} trading days"})
                continue
            rows = rows[:L]
            block = stocks[rows]
            gaps = np.isnan(block)
            complete = ~gaps.any(axis=0)
            # tickers absent for the whole quarter are unlisted, not short
            for t in tickers[~complete & ~gaps.all(axis=0)]:
                skips.append({"year": year, "quarter": q, "ticker": t, "reason": "missing days"})
            if not complete.any():
                continue
            n = int(complete.sum())
            label = len(xs)
            xs.append(np.concatenate([block[:, complete].T, np.broadcast_to(market[rows], (n, L))], axis=1))
            labels.append(np.full(n, label))
            metas.append(pd.DataFrame({
                "ticker": tickers[complete],
                "year": year,
                "quarter": q,
                "global_quarter": (year - cal.train_start_year) * 4 + q - 1,
                "start": rows[0],
                "end": rows[-1] + 1,
            }))
    if not xs:
        return SampleSet(np.zeros((0, 2 * L)), np.zeros(0, dtype=np.int64), 1,
                         pd.DataFrame(columns=["ticker", "year", "quarter", "global_quarter", "start", "end"]))
    return SampleSet(np.concatenate(xs), np.concatenate(labels), len(xs), pd.concat(metas, ignore_index=True))


def window_quarters(raw: RawPanel, cal: Optional[CalendarConfig] = None) -> QuarterWindows:
    """Cut the panel into per-stock quarterly windows labeled by quarter.

    Labels count the emitted quarters of each span in calendar order; the
    quarter index relative to ``train_start_year`` is kept in meta.
    """
    cal = cal or CalendarConfig()
    skips: List[dict] = []
    train = _windows_for_span(raw, cal.train_start_year, cal.train_end_year, cal, skips)
    if len(train) == 0:
        raise InsufficientDataError(
            f"no complete {cal.period_length}-day quarter in {cal.train_start_year}-{cal.train_end_year}")
    test = _windows_for_span(raw, cal.test_start_year, cal.test_end_year, cal, skips)
    skipped = pd.DataFrame(skips, columns=["year", "quarter", "ticker", "reason"])
    logger.info("Windowed %d training samples (%d quarters), %d test samples, %d skips",
                len(train), train.n_classes, len(test), len(skipped))
    return QuarterWindows(train, test, skipped)


def augment_noise(samples: SampleSet, sigma: float = 0.04, seed=0) -> SampleSet:
    """Add i.i.d. N(0, sigma^2) noise to every entry, market columns included."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return SampleSet(samples.X.copy(), samples.Y.copy(), samples.n_classes, samples.meta)
    noise = sigma * np.random.default_rng(seed).standard_normal(samples.X.shape)
    return SampleSet(samples.X + noise, samples.Y.copy(), samples.n_classes, samples.meta)


# -- stock-specific measures -------------------------------------------------

MEASURES = ("beta", "rho", "vol1", "vol5")


@dataclass
class StockMeasures:
    beta: np.ndarray
    rho: np.ndarray
    vol1: np.ndarray
    vol5: np.ndarray
    tickers: Optional[List[str]] = None
    classes: Dict[str, np.ndarray] = field(default_factory=dict)

    def get(self, name: str) -> np.ndarray:
        if name not in MEASURES:
            raise ValueError(f"unknown measure {name!r}, expected one of {MEASURES}")
        return getattr(self, name)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({m: self.get(m) for m in MEASURES})
        for name, ids in self.classes.items():
            df[f"{name}_class"] = ids
        if self.tickers is not None:
            df.insert(0, "ticker", self.tickers)
        return df

    def discretized(self, edges: Dict[str, np.ndarray]) -> "StockMeasures":
        classes = {name: discretize_quartiles(self.get(name), e) for name, e in edges.items()}
        return StockMeasures(self.beta, self.rho, self.vol1, self.vol5, self.tickers, classes)


def compute_measures(raw: RawPanel, end: Optional[int] = None, window: int = 252) -> StockMeasures:
    """Trailing beta and correlation over rows ``[end - window, end)``; volatility of the days after ``end``.

    ``vol1`` is ``|r_end|`` and ``vol5`` the sample standard deviation of the
    next five returns. Measures that the data cannot support are NaN.
    """
    n = len(raw)
    end = n if end is None else end
    if not 0 < end <= n:
        raise ValueError(f"end row {end} outside the panel (1..{n})")
    start = max(0, end - window)
    R = raw.returns.to_numpy(dtype=np.float64)
    M = raw.market.to_numpy(dtype=np.float64)

    r, m = R[start:end], M[start:end, None]
    mask = ~np.isnan(r)
    count = mask.sum(axis=0)
    mb = np.where(mask, m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        m_mean = mb.sum(axis=0) / count
        r_mean = np.where(mask, r, 0.0).sum(axis=0) / count
        dm = np.where(mask, m - m_mean, 0.0)
        dr = np.where(mask, r - r_mean, 0.0)
        cov = (dm * dr).sum(axis=0)
        var_m = (dm * dm).sum(axis=0)
        var_r = (dr * dr).sum(axis=0)
    usable = count >= 2
    if np.any(usable & (var_m == 0)):
        raise InsufficientDataError(f"market variance is zero over rows {start}..{end}")
    with np.errstate(invalid="ignore", divide="ignore"):
        beta = np.where(usable, cov / var_m, np.nan)
        rho = np.where(usable & (var_r > 0), cov / np.sqrt(var_m * var_r), np.where(usable, 0.0, np.nan))
    rho = np.clip(rho, -1.0, 1.0)

    vol1 = np.abs(R[end]) if end < n else np.full(R.shape[1], np.nan)
    if end + 5 <= n:
        vol5 = np.std(R[end:end + 5], axis=0, ddof=1)
    else:
        vol5 = np.full(R.shape[1], np.nan)
    return StockMeasures(beta, rho, vol1, vol5, raw.tickers)


def measures_for_samples(raw: RawPanel, samples: SampleSet, window: int = 252) -> StockMeasures:
    """Measures for each windowed sample, taken at the end of its quarter window."""
    if samples.meta is None or not {"ticker", "end"} <= set(samples.meta.columns):
        raise DataFormatError("samples need ticker/end meta; build them with window_quarters")
    out = {m: np.full(len(samples), np.nan) for m in MEASURES}
    col = {t: j for j, t in enumerate(raw.tickers)}
    for end, group in samples.meta.groupby("end"):
        measures = compute_measures(raw, int(end), window)
        j = np.array([col[t] for t in group["ticker"]])
        for m in MEASURES:
            out[m][group.index.to_numpy()] = measures.get(m)[j]
    return StockMeasures(out["beta"], out["rho"], out["vol1"], out["vol5"], list(samples.meta["ticker"]))


def quantile_edges(values: np.ndarray, n_bins: int = 4) -> np.ndarray:
    """Interior bin edges splitting the (training) values into ``n_bins`` equiprobable classes."""
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise InsufficientDataError("cannot compute bin edges from empty training values")
    if n_bins < 2:
        raise ValueError(f"n_bins must be at least 2, got {n_bins}")
    return np.quantile(values, np.arange(1, n_bins) / n_bins)


def discretize_quartiles(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Class id of each value under the given interior edges (monotone in the value)."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size == 0:
        raise InsufficientDataError("no bin edges given")
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right").astype(np.int64)


def class_midpoints(values: np.ndarray, n_bins: int = 4) -> np.ndarray:
    """Value standing for each class: the training quantile at the middle of its probability interval.

    For quartiles these are the 12.5th, 37.5th, 62.5th and 87.5th percentiles.
    """
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        raise InsufficientDataError("cannot compute class midpoints from empty training values")
    return np.quantile(values, (np.arange(n_bins) + 0.5) / n_bins)
