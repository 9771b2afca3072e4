"""Black-Scholes pricing and the market-neutral straddle backtest.

Each trading day the strategy estimates every stock's volatility from its last
50 returns, asks a volatility classifier for a prediction, buys straddles on
the ten stocks whose prediction most exceeds the estimate and sells them on
the ten with the lowest difference, and unwinds everything the next day.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.special import ndtr
from sklearn.preprocessing import StandardScaler

from datagen import RawPanel, class_midpoints, quantile_edges
from errors import InsufficientDataError
from nets import Network
from probes import LogRegModel, logreg_predict
from two_step import encode

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
LONG, SHORT = 1, -1

ArrayLike = Union[float, np.ndarray]


def norm_cdf(x: ArrayLike) -> ArrayLike:
    """Standard normal CDF."""
    return ndtr(x)


def bs_price(kind: str, spot: ArrayLike, strike: ArrayLike, r: ArrayLike, sigma: ArrayLike,
             T: ArrayLike) -> ArrayLike:
    """European option price; the put comes from put-call parity.

    With ``sigma == 0`` the call is its discounted intrinsic value.
    """
    if kind not in ("call", "put"):
        raise ValueError(f"kind must be 'call' or 'put', got {kind!r}")
    spot, strike, r, sigma, T = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64)
                                                      for v in (spot, strike, r, sigma, T)))
    if np.any(spot <= 0) or np.any(strike <= 0):
        raise ValueError("spot and strike must be positive")
    if np.any(T <= 0):
        raise ValueError("time to expiry must be positive")
    if np.any(sigma < 0):
        raise ValueError("volatility must be non-negative")

    discounted = strike * np.exp(-r * T)
    vol = sigma * np.sqrt(T)
    live = vol > 0
    safe_vol = np.where(live, vol, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(spot / strike) + (r + 0.5 * sigma * sigma) * T) / safe_vol
    d2 = d1 - safe_vol
    call = np.where(live, spot * norm_cdf(d1) - discounted * norm_cdf(d2), np.maximum(spot - discounted, 0.0))
    call = np.maximum(call, 0.0)
    price = call if kind == "call" else np.maximum(call - spot + discounted, 0.0)
    return float(price) if price.ndim == 0 else price


@dataclass(frozen=True)
class OptionQuote:
    kind: str
    spot: float
    strike: float
    r: float
    sigma: float
    T: float
    price: float

    @classmethod
    def priced(cls, kind: str, spot: float, strike: float, r: float, sigma: float, T: float) -> "OptionQuote":
        return cls(kind, spot, strike, r, sigma, T, bs_price(kind, spot, strike, r, sigma, T))


def straddle_value(spot: ArrayLike, strike: ArrayLike, r: float, sigma: ArrayLike, days: ArrayLike,
                   trading_days: int = TRADING_DAYS) -> ArrayLike:
    """Call plus put at the same strike and expiry."""
    T = np.asarray(days, dtype=np.float64) / trading_days
    return bs_price("call", spot, strike, r, sigma, T) + bs_price("put", spot, strike, r, sigma, T)


def estimate_vol(returns: np.ndarray, window: int = 50, trading_days: int = TRADING_DAYS) -> Optional[float]:
    """Annualized sample standard deviation of the last ``window`` returns; None when history is short."""
    recent = np.asarray(returns, dtype=np.float64)[-window:]
    if len(recent) < window or np.isnan(recent).any():
        return None
    if np.ptp(recent) == 0:
        return 0.0
    return float(np.std(recent, ddof=1) * np.sqrt(trading_days))


def _estimate_vols(block: np.ndarray, trading_days: int) -> np.ndarray:
    """Column-wise :func:`estimate_vol` over a full window block; NaN where a return is missing."""
    vols = np.std(block, axis=0, ddof=1) * np.sqrt(trading_days)
    vols[np.ptp(block, axis=0) == 0] = 0.0
    vols[np.isnan(block).any(axis=0)] = np.nan
    return vols


@dataclass
class TradeSelection:
    longs: np.ndarray
    shorts: np.ndarray


def select_trades(predicted: np.ndarray, measured: np.ndarray, asset_ids: Optional[np.ndarray] = None,
                  n_per_side: int = 10) -> Optional[TradeSelection]:
    """Long the top ``n_per_side`` by predicted minus measured volatility, short the bottom.

    Ties are ordered by asset id. Returns None when fewer than ``2 * n_per_side``
    assets have both numbers.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    ids = np.arange(len(predicted)) if asset_ids is None else np.asarray(asset_ids)
    eligible = np.isfinite(predicted) & np.isfinite(measured)
    if eligible.sum() < 2 * n_per_side:
        return None
    diff = (predicted - measured)[eligible]
    ids = ids[eligible]
    order = np.lexsort((ids, diff))
    return TradeSelection(longs=ids[order[-n_per_side:]], shorts=ids[order[:n_per_side]])


# -- volatility classifiers --------------------------------------------------

class BacktestConfig(BaseModel):
    r: float = 0.0
    trading_days: int = Field(TRADING_DAYS, ge=1)
    vol_window: int = Field(50, ge=2)
    n_per_side: int = Field(10, ge=1)
    strike_ratio: float = Field(1.05, gt=0.0)
    long_expiry_days: int = Field(60, ge=2)
    short_expiry_days: int = Field(5, ge=2)
    horizon: Literal[1, 5] = 1
    n_bins: int = Field(4, ge=2)
    start: Optional[str] = None
    end: Optional[str] = None
    seed: int = 0


def vol_to_sigma(values: ArrayLike, horizon: int, trading_days: int = TRADING_DAYS) -> ArrayLike:
    """Annualize a volatility measure: |daily return| is scaled by sqrt(pi/2) first, a 5-day std is not."""
    values = np.asarray(values, dtype=np.float64)
    if horizon == 1:
        values = values * np.sqrt(np.pi / 2.0)
    return values * np.sqrt(trading_days)


def window_features(raw: RawPanel, t: int, cols: np.ndarray, length: int = 50) -> np.ndarray:
    """Rows of ``length`` stock returns ending at day ``t`` followed by the market returns of the same days."""
    rows = slice(t - length + 1, t + 1)
    stocks = raw.returns.to_numpy(dtype=np.float64)[rows][:, cols].T
    market = raw.market.to_numpy(dtype=np.float64)[rows]
    return np.concatenate([stocks, np.broadcast_to(market, (len(cols), length))], axis=1)


class VolClassifier:
    """Predicts next-period volatility, annualized, for the given stock columns on day ``t``."""

    name = "base"

    def predict_sigma(self, raw: RawPanel, t: int, cols: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class OracleClassifier(VolClassifier):
    """Knows the realized volatility after day ``t``."""

    name = "oracle"

    def __init__(self, horizon: int = 1, trading_days: int = TRADING_DAYS):
        self.horizon = horizon
        self.trading_days = trading_days

    def predict_sigma(self, raw, t, cols):
        future = raw.returns.to_numpy(dtype=np.float64)[t + 1:t + 1 + self.horizon][:, cols]
        if len(future) < self.horizon:
            return np.full(len(cols), np.nan)
        value = np.abs(future[0]) if self.horizon == 1 else np.std(future, axis=0, ddof=1)
        return vol_to_sigma(value, self.horizon, self.trading_days)


class RandomClassifier(VolClassifier):
    """Uniformly random class per stock and day, mapped through the class midpoints."""

    name = "random"

    def __init__(self, midpoints: np.ndarray, seed: int = 0, horizon: int = 1,
                 trading_days: int = TRADING_DAYS):
        self.midpoints = np.asarray(midpoints, dtype=np.float64)
        self.seed = seed
        self.horizon = horizon
        self.trading_days = trading_days

    def predict_sigma(self, raw, t, cols):
        rng = np.random.default_rng([self.seed, t])
        classes = rng.integers(0, len(self.midpoints), size=len(cols))
        return vol_to_sigma(self.midpoints[classes], self.horizon, self.trading_days)


class ProbeClassifier(VolClassifier):
    """Logistic-regression volatility class from the raw window or its Z code."""

    def __init__(self, model: LogRegModel, midpoints: np.ndarray, encoder: Optional[Network] = None,
                 horizon: int = 1, window: int = 50, trading_days: int = TRADING_DAYS,
                 scaler: Optional[StandardScaler] = None):
        self.model = model
        self.midpoints = np.asarray(midpoints, dtype=np.float64)
        self.encoder = encoder
        self.scaler = scaler
        self.horizon = horizon
        self.window = window
        self.trading_days = trading_days
        self.name = "z" if encoder is not None else "x"

    def features(self, raw, t, cols):
        x = window_features(raw, t, cols, self.window)
        if self.encoder is not None and self.scaler is not None:
            x = self.scaler.transform(x)
        return encode(self.encoder, x) if self.encoder is not None else x

    def predict_sigma(self, raw, t, cols):
        if len(cols) == 0:
            return np.zeros(0)
        classes = logreg_predict(self.model, self.features(raw, t, cols))
        return vol_to_sigma(self.midpoints[classes], self.horizon, self.trading_days)


def midpoints_from_training(train_values: np.ndarray, n_bins: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Class edges and class midpoints of a training volatility distribution."""
    return quantile_edges(train_values, n_bins), class_midpoints(train_values, n_bins)


# -- backtest ----------------------------------------------------------------

@dataclass
class StraddlePosition:
    asset: str
    direction: int
    entry_date: str
    exit_date: str
    spot: float
    strike: float
    expiry_days: int
    entry_call: float
    entry_put: float
    mark: float
    exit_call: float
    exit_put: float
    flagged: bool = False

    @property
    def entry_value(self) -> float:
        return self.entry_call + self.entry_put

    @property
    def exit_value(self) -> float:
        return self.exit_call + self.exit_put

    @property
    def pnl(self) -> float:
        return self.direction * (self.exit_value - self.entry_value)


DAILY_COLUMNS = ["date", "n_long", "n_short", "pnl"]


def summarize(daily: pd.DataFrame) -> Dict[str, float]:
    pnl = daily["pnl"].to_numpy(dtype=np.float64)
    if len(pnl) == 0:
        return {"mean": 0.0, "sd": 0.0, "pct_positive": 0.0, "n_days": 0}
    return {
        "mean": float(np.mean(pnl)),
        "sd": float(np.std(pnl, ddof=1)) if len(pnl) > 1 else 0.0,
        "pct_positive": float(np.mean(pnl > 0)),
        "n_days": int(len(pnl)),
    }


@dataclass
class BacktestReport:
    classifier: str
    daily: pd.DataFrame
    positions: List[StraddlePosition] = field(default_factory=list)
    skips: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["date", "reason"]))

    @property
    def summary(self) -> Dict[str, float]:
        out = summarize(self.daily)
        out["n_skipped"] = int(len(self.skips))
        out["n_flagged"] = int(sum(p.flagged for p in self.positions))
        return out

    def positions_frame(self) -> pd.DataFrame:
        rows = [dict(asdict(p), entry_value=p.entry_value, exit_value=p.exit_value, pnl=p.pnl)
                for p in self.positions]
        return pd.DataFrame(rows)


def _spot_prices(returns: np.ndarray, base: float = 100.0) -> np.ndarray:
    growth = np.cumprod(1.0 + np.nan_to_num(returns, nan=0.0), axis=0)
    prices = base * growth
    prices[np.isnan(returns)] = np.nan
    return prices


def _trading_rows(raw: RawPanel, cfg: BacktestConfig) -> np.ndarray:
    dates = raw.market.index
    rows = np.arange(cfg.vol_window - 1, len(raw) - 1)
    if cfg.start is not None:
        rows = rows[dates[rows] >= pd.Timestamp(cfg.start)]
    if cfg.end is not None:
        rows = rows[dates[rows] <= pd.Timestamp(cfg.end)]
    return rows


def run_backtest(raw: RawPanel, classifier: VolClassifier, cfg: Optional[BacktestConfig] = None) -> BacktestReport:
    """Trade straddles every day in the span and unwind them the next trading day.

    Entry legs are priced at the trailing volatility estimate; the value at the
    predicted volatility is kept as the position's mark. A position whose
    stock has no positive price on the exit day is closed at intrinsic value and
    flagged. A stock trades only while its price is positive.
    """
    cfg = cfg or BacktestConfig()
    rows = _trading_rows(raw, cfg)
    if len(rows) == 0:
        raise InsufficientDataError(
            f"panel of {len(raw)} days leaves no tradable day after a {cfg.vol_window}-day warm-up")

    R = raw.returns.to_numpy(dtype=np.float64)
    prices = _spot_prices(R)
    tickers = np.array(raw.tickers, dtype=object)
    dates = raw.market.index.strftime("%Y-%m-%d")
    W = cfg.vol_window

    daily, positions, skips = [], [], []
    for t in rows:
        est = _estimate_vols(R[t - W + 1:t + 1], cfg.trading_days)
        with np.errstate(invalid="ignore"):
            cols = np.flatnonzero(np.isfinite(est) & (prices[t] > 0))
        predicted = classifier.predict_sigma(raw, t, cols)
        sel = select_trades(predicted, est[cols], cols, cfg.n_per_side)
        if sel is None:
            logger.warning("No trades on %s: %d eligible stocks", dates[t], len(cols))
            skips.append({"date": dates[t], "reason": f"{len(cols)} eligible stocks"})
            continue

        pred_by_col = dict(zip(cols, predicted))
        exit_est = _estimate_vols(R[t - W + 2:t + 2], cfg.trading_days)
        day_positions = []
        for direction, chosen, days in ((LONG, sel.longs, cfg.long_expiry_days),
                                        (SHORT, sel.shorts, cfg.short_expiry_days)):
            spot = prices[t, chosen]
            strike = cfg.strike_ratio * spot
            T = days / cfg.trading_days
            call = bs_price("call", spot, strike, cfg.r, est[chosen], T)
            put = bs_price("put", spot, strike, cfg.r, est[chosen], T)
            marks = straddle_value(spot, strike, cfg.r, np.array([pred_by_col[c] for c in chosen]),
                                   days, cfg.trading_days)
            next_spot = prices[t + 1, chosen]
            with np.errstate(invalid="ignore"):
                flagged = ~(next_spot > 0) | ~np.isfinite(exit_est[chosen])
            live_spot = np.where(flagged, spot, next_spot)
            live_sigma = np.where(flagged, 0.0, exit_est[chosen])
            T_exit = (days - 1) / cfg.trading_days
            exit_call = np.where(flagged, np.maximum(spot - strike, 0.0),
                                 bs_price("call", live_spot, strike, cfg.r, live_sigma, T_exit))
            exit_put = np.where(flagged, np.maximum(strike - spot, 0.0),
                                bs_price("put", live_spot, strike, cfg.r, live_sigma, T_exit))
            for i, c in enumerate(chosen):
                if flagged[i]:
                    logger.warning("%s has no positive price on %s; closed at intrinsic value", tickers[c], dates[t + 1])
                day_positions.append(StraddlePosition(
                    asset=str(tickers[c]), direction=direction, entry_date=dates[t], exit_date=dates[t + 1],
                    spot=float(spot[i]), strike=float(strike[i]), expiry_days=days,
                    entry_call=float(call[i]), entry_put=float(put[i]), mark=float(marks[i]),
                    exit_call=float(exit_call[i]), exit_put=float(exit_put[i]), flagged=bool(flagged[i]),
                ))
        gross = sum(p.entry_value for p in day_positions)
        pnl = sum(p.pnl for p in day_positions) / gross if gross > 0 else 0.0
        daily.append((dates[t], len(sel.longs), len(sel.shorts), pnl))
        positions.extend(day_positions)

    report = BacktestReport(
        classifier=classifier.name,
        daily=pd.DataFrame(daily, columns=DAILY_COLUMNS),
        positions=positions,
        skips=pd.DataFrame(skips, columns=["date", "reason"]),
    )
    s = report.summary
    logger.info("Backtest (%s): %d days, mean %.5f, sd %.5f, %.1f%% positive",
                classifier.name, s["n_days"], s["mean"], s["sd"], 100 * s["pct_positive"])
    return report
