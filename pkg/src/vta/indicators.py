"""Window statistics and the ten technical indicators used for annotation.

Every function returns a float array aligned with its input; entries whose lookback is not yet
satisfied are NaN.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError
from .market import BarSeries

# Relative tolerance under which a denominator counts as zero. Means of identical floats are not
# always bit-identical to the inputs, so an exact == 0 test would let rounding noise through.
_FLAT = 1e-12


@dataclass(frozen=True)
class IndicatorConfig:
    sma_n: int = 10
    ema_n: int = 10
    momentum_n: int = 10
    rsi_n: int = 14
    macd_fast: int = 12
    macd_slow: int = 26
    willr_n: int = 10
    cci_n: int = 10
    adx_n: int = 10
    boll_n: int = 20
    boll_k: float = 2.0
    stoch_n: int = 10

    def __post_init__(self):
        periods = {k: v for k, v in asdict(self).items() if k != "boll_k"}
        bad = [k for k, v in periods.items() if int(v) != v or v < 1]
        if bad:
            raise ParameterError(f"indicator periods must be integers >= 1: {', '.join(bad)}")
        if self.macd_fast >= self.macd_slow:
            raise ParameterError("macd_fast must be < macd_slow")
        if not self.boll_k > 0:
            raise ParameterError("boll_k must be > 0")


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _check_period(n: int) -> None:
    if n < 1:
        raise ParameterError(f"period must be >= 1, got {n}")


def _rolling(x: np.ndarray, n: int) -> np.ndarray | None:
    if len(x) < n:
        return None
    return sliding_window_view(x, n)


def sma(prices, n: int) -> np.ndarray:
    _check_period(n)
    x = _as_array(prices)
    out = np.full(len(x), np.nan)
    win = _rolling(x, n)
    if win is not None:
        out[n - 1:] = win.mean(axis=1)
    return out


def ema(prices, n: int) -> np.ndarray:
    """alpha = 2/(n+1), seeded at index n-1 with the SMA of the first n prices."""
    _check_period(n)
    x = _as_array(prices)
    out = np.full(len(x), np.nan)
    if len(x) < n:
        return out
    alpha = 2.0 / (n + 1)
    prev = x[:n].mean()
    out[n - 1] = prev
    for t in range(n, len(x)):
        prev = x[t] * alpha + prev * (1 - alpha)
        out[t] = prev
    return out


def momentum(closes, n: int) -> np.ndarray:
    _check_period(n)
    x = _as_array(closes)
    out = np.full(len(x), np.nan)
    if len(x) > n:
        out[n:] = x[n:] - x[:-n]
    return out


def rsi(closes, n: int) -> np.ndarray:
    """Simple (not Wilder-smoothed) average gain and loss over the last n changes."""
    _check_period(n)
    x = _as_array(closes)
    out = np.full(len(x), np.nan)
    if len(x) < n + 1:
        return out
    change = np.diff(x)
    gains = sliding_window_view(np.where(change > 0, change, 0.0), n).mean(axis=1)
    losses = sliding_window_view(np.where(change < 0, -change, 0.0), n).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = 100.0 - 100.0 / (1.0 + gains / losses)
    out[n:] = np.where(losses == 0, 100.0, value)
    return out


def macd_line(closes, fast: int = 12, slow: int = 26) -> np.ndarray:
    if fast >= slow:
        raise ParameterError(f"MACD fast period ({fast}) must be below slow period ({slow})")
    return ema(closes, fast) - ema(closes, slow)


def _highest_lowest(high: np.ndarray, low: np.ndarray, n: int):
    hh = np.full(len(high), np.nan)
    ll = np.full(len(low), np.nan)
    if len(high) >= n:
        hh[n - 1:] = sliding_window_view(high, n).max(axis=1)
        ll[n - 1:] = sliding_window_view(low, n).min(axis=1)
    return hh, ll


def williams_r(bars: BarSeries, n: int) -> np.ndarray:
    _check_period(n)
    hh, ll = _highest_lowest(_as_array(bars.high), _as_array(bars.low), n)
    close = _as_array(bars.close)
    rng = hh - ll
    with np.errstate(divide="ignore", invalid="ignore"):
        value = (hh - close) / rng * -100.0
    return np.where(np.isnan(rng), np.nan, np.where(rng == 0, -50.0, value))


def stochastic_k(bars: BarSeries, n: int) -> np.ndarray:
    _check_period(n)
    hh, ll = _highest_lowest(_as_array(bars.high), _as_array(bars.low), n)
    close = _as_array(bars.close)
    rng = hh - ll
    with np.errstate(divide="ignore", invalid="ignore"):
        value = (close - ll) / rng * 100.0
    return np.where(np.isnan(rng), np.nan, np.where(rng == 0, 50.0, value))


def typical_price(bars: BarSeries) -> np.ndarray:
    return (_as_array(bars.high) + _as_array(bars.low) + _as_array(bars.close)) / 3.0


def cci(bars: BarSeries, n: int) -> np.ndarray:
    _check_period(n)
    tp = typical_price(bars)
    out = np.full(len(tp), np.nan)
    win = _rolling(tp, n)
    if win is None:
        return out
    ma = win.mean(axis=1)
    mean_dev = np.abs(win - ma[:, None]).mean(axis=1)
    flat = mean_dev <= _FLAT * np.maximum(1.0, np.abs(ma))
    with np.errstate(divide="ignore", invalid="ignore"):
        value = (tp[n - 1:] - ma) / (0.015 * mean_dev)
    out[n - 1:] = np.where(flat, 0.0, value)
    return out


def directional_movement(bars: BarSeries) -> tuple[np.ndarray, np.ndarray]:
    """DM+ and DM- for bars 1..len-1 (the first bar has no predecessor)."""
    high, low = _as_array(bars.high), _as_array(bars.low)
    up = high[1:] - high[:-1]
    down = low[:-1] - low[1:]
    dm_plus = np.where((up > down) & (up > 0), up, 0.0)
    dm_minus = np.where((down > up) & (down > 0), down, 0.0)
    return dm_plus, dm_minus


def adx(bars: BarSeries, n: int) -> np.ndarray:
    """100 * EMA_n(|DM+ - DM-|) / (DM+ + DM-), with a zero-denominator guard.

    This is the single-line formula from the indicator table, not the doubly smoothed classic.
    """
    _check_period(n)
    out = np.full(len(bars), np.nan)
    if len(bars) < n + 1:
        return out
    dm_plus, dm_minus = directional_movement(bars)
    smoothed = ema(np.abs(dm_plus - dm_minus), n)
    denom = dm_plus + dm_minus
    with np.errstate(divide="ignore", invalid="ignore"):
        value = 100.0 * smoothed / denom
    out[1:] = np.where(np.isnan(smoothed), np.nan, np.where(denom == 0, 0.0, value))
    return out


def bollinger(closes, n: int, k: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Upper and lower bands at k population standard deviations around the n-period SMA."""
    _check_period(n)
    if not k > 0:
        raise ParameterError(f"Bollinger multiplier must be > 0, got {k}")
    x = _as_array(closes)
    upper = np.full(len(x), np.nan)
    lower = np.full(len(x), np.nan)
    win = _rolling(x, n)
    if win is not None:
        ma = win.mean(axis=1)
        sd = win.std(axis=1)
        upper[n - 1:] = ma + k * sd
        lower[n - 1:] = ma - k * sd
    return upper, lower


class WindowStats(NamedTuple):
    mean: float
    min: float
    max: float
    first: float
    last: float


def window_stats(prices) -> WindowStats:
    x = _as_array(prices)
    if x.size == 0:
        raise ValueError("window_stats needs a non-empty series")
    return WindowStats(float(x.mean()), float(x.min()), float(x.max()), float(x[0]), float(x[-1]))


INDICATOR_NAMES = ("SMA", "EMA", "Momentum", "RSI", "MACD", "WilliamsR", "CCI", "ADX",
                   "BollingerUpper", "BollingerLower", "StochasticK")


@dataclass
class IndicatorPanel:
    dates: np.ndarray
    series: dict[str, np.ndarray]

    def latest(self) -> dict[str, float | None]:
        """Value of each indicator at the last date, None where the lookback is unmet."""
        out = {}
        for name in INDICATOR_NAMES:
            v = self.series[name][-1] if len(self.dates) else np.nan
            out[name] = None if np.isnan(v) else float(v)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("date",) + INDICATOR_NAMES)
            for i, d in enumerate(self.dates):
                w.writerow([str(d)] + ["" if np.isnan(self.series[k][i]) else repr(float(self.series[k][i]))
                                       for k in INDICATOR_NAMES])

    def to_json(self) -> str:
        return json.dumps({
            "dates": [str(d) for d in self.dates],
            "series": {k: [None if np.isnan(v) else float(v) for v in self.series[k]]
                       for k in INDICATOR_NAMES},
        })


def compute_panel(bars: BarSeries, cfg: IndicatorConfig | None = None, price: str = "adj_close") -> IndicatorPanel:
    """All indicators over ``bars``. Price-only indicators read ``price``; range-based ones
    (Williams %R, CCI, ADX, %K) read high/low/close."""
    cfg = cfg or IndicatorConfig()
    p = getattr(bars, price)
    upper, lower = bollinger(p, cfg.boll_n, cfg.boll_k)
    return IndicatorPanel(bars.dates, {
        "SMA": sma(p, cfg.sma_n),
        "EMA": ema(p, cfg.ema_n),
        "Momentum": momentum(p, cfg.momentum_n),
        "RSI": rsi(p, cfg.rsi_n),
        "MACD": macd_line(p, cfg.macd_fast, cfg.macd_slow),
        "WilliamsR": williams_r(bars, cfg.willr_n),
        "CCI": cci(bars, cfg.cci_n),
        "ADX": adx(bars, cfg.adx_n),
        "BollingerUpper": upper,
        "BollingerLower": lower,
        "StochasticK": stochastic_k(bars, cfg.stoch_n),
    })
