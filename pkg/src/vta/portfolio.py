"""Daily-rebalanced long-only Markowitz portfolios built from multi-day forecasts."""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ParameterError, UndefinedMetricError, ValidationError
from .market import BarSeries, PriceWindow, window_at

TRADING_DAYS = 252
PANEL_RIDGE = 1e-6


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def objective(w, mu, sigma, kappa: float) -> float:
    w = np.asarray(w, dtype=float)
    return float(mu @ w - 0.5 * kappa * w @ sigma @ w)


def _polish(w, mu, sigma, kappa, tol=1e-12):
    """Solve the equality-constrained QP on the support of w exactly; keep it if it stays feasible
    and scores at least as well. Projected gradient gets the support right long before it gets
    the weights right to 1e-9."""
    support = np.nonzero(w > tol)[0]
    m = support.size
    if m == 0 or kappa == 0:
        return w
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = kappa * sigma[np.ix_(support, support)]
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    rhs = np.append(mu[support], 1.0)
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return w
    cand = np.zeros_like(w)
    cand[support] = sol[:m]
    if np.any(cand < 0) or not np.all(np.isfinite(cand)):
        return w
    cand /= cand.sum()
    return cand if objective(cand, mu, sigma, kappa) >= objective(w, mu, sigma, kappa) else w


def markowitz(mu, sigma, kappa: float = 5.0, iterations: int = 2000, ridge: float = 1e-12) -> np.ndarray:
    """argmax mu'w - kappa/2 w'Sigma w over the simplex: accelerated projected gradient with a fixed
    iteration budget, then an exact solve on the recovered support."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = mu.size
    if mu.ndim != 1 or n == 0 or sigma.shape != (n, n):
        raise ValidationError(f"need mu of length n and an n x n sigma, got {mu.shape} and {sigma.shape}")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and math.isfinite(kappa)):
        raise ValidationError("markowitz inputs must be finite")
    if kappa < 0:
        raise ParameterError("risk aversion kappa must be >= 0")
    if n == 1:
        return np.ones(1)
    sigma = 0.5 * (sigma + sigma.T) + ridge * np.eye(n)
    lip = kappa * float(np.linalg.eigvalsh(sigma)[-1])
    if lip <= 0:
        # linear objective: split evenly over the best assets
        best = np.isclose(mu, mu.max(), rtol=0, atol=1e-15)
        return best / best.sum()
    step = 1.0 / lip
    w = np.full(n, 1.0 / n)
    z, t = w.copy(), 1.0
    for _ in range(iterations):
        w_next = project_simplex(z + step * (mu - kappa * sigma @ z))
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = w_next + ((t - 1) / t_next) * (w_next - w)
        w, t = w_next, t_next
    return _polish(w, mu, sigma, kappa)


# -- forecasts to moments --------------------------------------------------------------------

@dataclass
class ForecastPanel:
    anchor: np.datetime64
    symbols: list[str]
    last_prices: np.ndarray  # (n,) price at the anchor
    prices: np.ndarray  # (n, T') forecast prices in currency

    def __post_init__(self):
        self.last_prices = np.asarray(self.last_prices, dtype=float)
        self.prices = np.atleast_2d(np.asarray(self.prices, dtype=float))
        if self.prices.shape[0] != len(self.symbols) or self.last_prices.shape != (len(self.symbols),):
            raise ValidationError("panel needs one price path and one anchor price per symbol")

    def returns(self) -> np.ndarray:
        """(n, T') simple daily returns along each forecast path, starting from the anchor price."""
        path = np.column_stack([self.last_prices, self.prices])
        return path[:, 1:] / path[:, :-1] - 1.0


def panel_moments(panel: ForecastPanel | np.ndarray, ridge: float = PANEL_RIDGE) -> tuple[np.ndarray, np.ndarray]:
    """Mean predicted daily return per symbol and the population covariance of the return paths."""
    r = panel.returns() if isinstance(panel, ForecastPanel) else np.atleast_2d(np.asarray(panel, dtype=float))
    if r.shape[1] < 2:
        raise ValidationError("need at least two predicted days to estimate a covariance")
    mu = r.mean(axis=1)
    dev = r - mu[:, None]
    sigma = dev @ dev.T / r.shape[1] + ridge * np.eye(r.shape[0])
    return mu, sigma


# -- metrics ---------------------------------------------------------------------------------

class Metrics(NamedTuple):
    returns: float
    volatility: float
    drawdown: float
    sharpe: float | None


def daily_returns(equity) -> np.ndarray:
    eq = np.asarray(equity, dtype=float)
    return eq[1:] / eq[:-1] - 1.0


def max_drawdown(equity) -> float:
    eq = np.asarray(equity, dtype=float)
    return float(np.min(eq / np.maximum.accumulate(eq)) - 1.0)


def sharpe_ratio(equity) -> float:
    r = daily_returns(equity)
    sd = r.std()
    if sd == 0:
        raise UndefinedMetricError("Sharpe ratio is undefined for a zero-volatility equity curve")
    return float(r.mean() * TRADING_DAYS / (sd * math.sqrt(TRADING_DAYS)))


def metrics(equity, strict: bool = True) -> Metrics:
    """Total return, annualised volatility, maximum drawdown and annualised Sharpe (risk-free 0).

    With ``strict=False`` an undefined Sharpe ratio is reported as None instead of raising.
    """
    eq = np.asarray(equity, dtype=float)
    if eq.size < 2:
        raise ValidationError("metrics need at least two equity points")
    if np.any(eq <= 0) or not np.all(np.isfinite(eq)):
        raise ValidationError("equity must be finite and positive")
    r = daily_returns(eq)
    try:
        sharpe = sharpe_ratio(eq)
    except UndefinedMetricError:
        if strict:
            raise
        sharpe = None
    return Metrics(float(eq[-1] / eq[0] - 1.0), float(r.std() * math.sqrt(TRADING_DAYS)), max_drawdown(eq), sharpe)


# -- backtest --------------------------------------------------------------------------------

@dataclass
class LedgerRow:
    date: str
    weights: np.ndarray
    turnover: float
    realized_return: float
    equity: float


@dataclass
class BacktestLedger:
    symbols: list[str]
    rows: list[LedgerRow] = field(default_factory=list)
    initial_equity: float = 1.0
    kappa: float = 5.0
    cost_bps: float = 0.0
    skipped: list[dict] = field(default_factory=list)

    def equity(self) -> np.ndarray:
        return np.array([self.initial_equity] + [r.equity for r in self.rows])

    def summary(self) -> dict:
        m = metrics(self.equity(), strict=False) if self.rows else Metrics(None, None, None, None)
        return {"returns": m.returns, "volatility": m.volatility, "drawdown": m.drawdown, "sharpe": m.sharpe,
                "days": len(self.rows), "symbols": self.symbols, "kappa": self.kappa, "cost_bps": self.cost_bps,
                "initial_equity": self.initial_equity, "skipped": self.skipped}


def _normalized_forecast(out) -> np.ndarray:
    return np.asarray(out.y_final if hasattr(out, "y_final") else out, dtype=float)


Forecaster = Callable[[str, PriceWindow], object]


def backtest(forecaster: Forecaster, data: Mapping[str, BarSeries], start, end=None, kappa: float = 5.0,
             cost_bps: float = 0.0, window: int = 10, workers: int = 1) -> BacktestLedger:
    """Rebalance every trading day in [start, end): forecast each symbol from the window ending
    that day, allocate with Markowitz on the forecast moments, and earn the next day's realised
    adjusted-close returns minus turnover * cost.

    ``forecaster(symbol, window)`` returns normalised prices for the next T' days (or an object
    with a ``y_final`` attribute holding them).
    """
    if cost_bps < 0:
        raise ParameterError("cost_bps must be >= 0")
    symbols = sorted(data)
    if not symbols:
        raise ValidationError("backtest needs at least one symbol")
    start = np.datetime64(start, "D")
    end = None if end is None else np.datetime64(end, "D")
    every_day = np.unique(np.concatenate([data[s].dates for s in symbols]))
    in_range = (every_day >= start) & ((every_day < end) if end is not None else True)
    index = {s: {d: i for i, d in enumerate(data[s].dates)} for s in symbols}

    ledger = BacktestLedger(symbols, kappa=kappa, cost_bps=cost_bps)
    equity = ledger.initial_equity
    held = np.zeros(len(symbols))  # weights after the previous day's drift; cash at the start
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for k in np.nonzero(in_range)[0]:
            if k + 1 >= every_day.size:
                break
            day, nxt = every_day[k], every_day[k + 1]
            missing = [s for s in symbols
                       if day not in index[s] or nxt not in index[s] or index[s][day] + 1 < window]
            if missing:
                for s in missing:
                    ledger.skipped.append({"date": str(day), "symbol": s, "reason": "missing data"})
                warnings.warn(f"{day}: skipped, no usable data for {', '.join(missing)}")
                continue
            wins = [window_at(data[s], index[s][day], window, s) for s in symbols]
            calls = [(s, w) for s, w in zip(symbols, wins)]
            outs = list(pool.map(lambda a: forecaster(*a), calls)) if pool else [forecaster(*a) for a in calls]
            prices = np.stack([w.normalizer.inverse(_normalized_forecast(o)) for w, o in zip(wins, outs)])
            last = np.array([data[s].adj_close[index[s][day]] for s in symbols])
            panel = ForecastPanel(day, symbols, last, prices)
            if len(symbols) == 1:
                weights = np.ones(1)
            else:
                mu, sigma = panel_moments(panel)
                weights = markowitz(mu, sigma, kappa)
            realized = np.array([data[s].adj_close[index[s][nxt]] for s in symbols]) / last - 1.0
            turnover = float(np.abs(weights - held).sum())
            net = float(weights @ realized) - turnover * cost_bps / 1e4
            equity = equity * (1.0 + net)
            gross = 1.0 + float(weights @ realized)
            held = weights * (1.0 + realized) / gross if gross > 0 else weights
            ledger.rows.append(LedgerRow(str(day), weights, turnover, net, equity))
    finally:
        if pool:
            pool.shutdown()
    return ledger


def equal_weight_equity(data: Mapping[str, BarSeries], dates: Sequence[str]) -> np.ndarray:
    """Daily-rebalanced equal-weight benchmark over the ledger's dates."""
    symbols = sorted(data)
    eq = [1.0]
    for d in dates:
        d = np.datetime64(d, "D")
        rets = []
        for s in symbols:
            i = int(np.searchsorted(data[s].dates, d))
            rets.append(data[s].adj_close[i + 1] / data[s].adj_close[i] - 1.0)
        eq.append(eq[-1] * (1.0 + float(np.mean(rets))))
    return np.array(eq)


# -- serialisation ---------------------------------------------------------------------------

def write_ledger(ledger: BacktestLedger, csv_path, json_path=None) -> dict:
    """CSV rows with repr() floats (exact round trip) and, optionally, a JSON summary."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + [f"w_{s}" for s in ledger.symbols] + ["turnover", "realized_return", "equity"])
        for r in ledger.rows:
            w.writerow([r.date] + [repr(float(x)) for x in r.weights]
                       + [repr(r.turnover), repr(r.realized_return), repr(r.equity)])
    summary = ledger.summary()
    if json_path is not None:
        Path(json_path).write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def read_ledger(csv_path, json_path=None) -> BacktestLedger:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        symbols = [h[2:] for h in header[1:-3]]
        rows = [LedgerRow(rec[0], np.array([float(x) for x in rec[1:-3]]), float(rec[-3]), float(rec[-2]),
                          float(rec[-1])) for rec in reader]
    ledger = BacktestLedger(symbols, rows)
    if json_path is not None:
        meta = json.loads(Path(json_path).read_text())
        ledger.initial_equity = meta["initial_equity"]
        ledger.kappa = meta["kappa"]
        ledger.cost_bps = meta["cost_bps"]
        ledger.skipped = meta["skipped"]
    return ledger
