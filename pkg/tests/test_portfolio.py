import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vta.errors import UndefinedMetricError, ValidationError
from vta.market import Regime, synth_market
from vta.portfolio import (ForecastPanel, backtest, equal_weight_equity, markowitz, max_drawdown, metrics,
                           objective, panel_moments, project_simplex, read_ledger, write_ledger)


def random_instance(rng, n=3):
    a = rng.normal(size=(n, n))
    return rng.normal(0, 0.02, n), a @ a.T / n * 1e-3


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_projection_on_simplex(v):
    w = project_simplex(v)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-9


def test_projection_is_nearest_point():
    rng = np.random.default_rng(0)
    grid = oracles.simplex_grid(0.02)
    for _ in range(20):
        v = rng.normal(size=3)
        w = project_simplex(v)
        assert np.sum((w - v) ** 2) <= np.min(np.sum((grid - v) ** 2, axis=1)) + 1e-12


def test_markowitz_examples():
    assert np.abs(markowitz(np.zeros(2), np.eye(2)) - 0.5).max() < 1e-6
    assert markowitz([0.3], [[2.0]]).tolist() == [1.0]
    assert np.array_equal(markowitz([0.1, 0.2, 0.2], np.zeros((3, 3)), ridge=0), [0, 0.5, 0.5])
    with pytest.raises(ValidationError):
        markowitz([np.nan, 0.1], np.eye(2))
    with pytest.raises(ValidationError):
        markowitz([0.1, 0.1], np.eye(3))


def test_markowitz_grid_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        mu, sigma = random_instance(rng)
        w = markowitz(mu, sigma, 5.0)
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-9
        assert objective(w, mu, sigma, 5.0) >= oracles.grid_optimum(mu, sigma, 5.0) - 1e-4


@given(seed=st.integers(0, 10_000), n=st.integers(2, 6), c=st.floats(0.1, 10))
def test_markowitz_homogeneity(seed, n, c):
    mu, sigma = random_instance(np.random.default_rng(seed), n)
    a = markowitz(mu, sigma, 5.0)
    b = markowitz(c * mu, sigma, 5.0 * c)
    assert np.abs(a - b).max() < 1e-6


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000))
def test_kappa_monotone_variance(seed):
    mu, sigma = random_instance(np.random.default_rng(seed), 4)
    var = [w @ sigma @ w for w in (markowitz(mu, sigma, k) for k in (0.5, 2.0, 5.0, 20.0, 100.0))]
    assert all(b <= a + 1e-12 for a, b in zip(var, var[1:]))


def test_panel_moments_examples():
    path = np.array([0.01, -0.02, 0.03, 0.0])
    mu, sigma = panel_moments(np.vstack([path, path]), ridge=0.0)
    assert sigma[0, 1] == sigma[0, 0] == sigma[1, 1]
    mu, sigma = panel_moments(np.zeros((3, 5)))
    assert np.array_equal(sigma, 1e-6 * np.eye(3)) and np.all(mu == 0)
    r = np.random.default_rng(0).normal(size=(4, 10))
    mu, sigma = panel_moments(r, ridge=0.0)
    assert np.abs(sigma - np.array(oracles.covariance(r.T.tolist()))).max() < 1e-12
    with pytest.raises(ValidationError):
        panel_moments(np.zeros((2, 1)))


def test_forecast_panel_returns():
    p = ForecastPanel(np.datetime64("2021-01-04"), ["A", "B"], [100.0, 50.0], [[101.0, 99.99], [50.0, 55.0]])
    assert np.allclose(p.returns(), [[0.01, 99.99 / 101 - 1], [0.0, 0.1]], rtol=1e-14)


def test_metrics_examples():
    assert max_drawdown([1.0, 1.1, 1.2, 1.5]) == 0.0
    assert max_drawdown([1.0, 1.2, 0.9, 1.1]) == pytest.approx(-0.25, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        metrics([1.0, 1.0, 1.0])
    m = metrics([1.0, 1.0, 1.0], strict=False)
    assert (m.returns, m.volatility, m.sharpe) == (0.0, 0.0, None)
    eq = np.array([1.0, 1.01, 0.99, 1.02])
    r = eq[1:] / eq[:-1] - 1
    m = metrics(eq)
    assert m.volatility == pytest.approx(np.std(r) * math.sqrt(252), rel=1e-14)
    assert m.sharpe == pytest.approx(np.mean(r) * 252 / (np.std(r) * math.sqrt(252)), rel=1e-14)
    with pytest.raises(ValidationError):
        metrics([1.0])


def market(n_sym=3, days=80, seed=0):
    return {f"S{i}": synth_market(seed + i, days, Regime(drift=0.004 * (i - 1), volatility=0.01))
            for i in range(n_sym)}


def oracle_forecaster(data, horizon=10):
    def f(symbol, window):
        s = data[symbol]
        i = s.index_of(window.anchor)
        future = s.adj_close[i + 1:i + 1 + horizon]
        future = np.concatenate([future, np.repeat(future[-1:], horizon - len(future))])
        return window.normalizer.transform(future)
    return f


def test_single_asset_is_buy_and_hold():
    data = market(1)
    led = backtest(oracle_forecaster(data), data, data["S0"].dates[20])
    eq = led.equity()
    p = data["S0"].adj_close
    assert np.allclose(eq[1:], p[21:21 + len(eq) - 1] / p[20], rtol=1e-12)
    assert all(r.weights.tolist() == [1.0] for r in led.rows)


def test_oracle_beats_equal_weight_and_is_deterministic(tmp_path):
    data = market(3, 120)
    start = data["S0"].dates[30]
    a = backtest(oracle_forecaster(data), data, start)
    b = backtest(oracle_forecaster(data), data, start, workers=3)
    write_ledger(a, tmp_path / "a.csv")
    write_ledger(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    bench = equal_weight_equity(data, [r.date for r in a.rows])
    assert a.equity()[-1] >= bench[-1]
    assert all(abs(r.weights.sum() - 1) < 1e-9 and np.all(r.weights >= 0) for r in a.rows)


def test_costs_and_turnover():
    data = market(2, 60)
    start = data["S0"].dates[20]
    free = backtest(oracle_forecaster(data), data, start)
    paid = backtest(oracle_forecaster(data), data, start, cost_bps=50)
    assert free.rows[0].turnover == pytest.approx(1.0)
    assert paid.equity()[-1] < free.equity()[-1]


def test_missing_dates_are_skipped():
    data = market(2, 60)
    s = data["S1"]
    keep = np.ones(len(s), dtype=bool)
    keep[30] = False
    data["S1"] = type(s)(*(getattr(s, c)[keep] for c in ("dates", "open", "high", "low", "close", "adj_close",
                                                          "volume")))
    with pytest.warns(UserWarning, match="skipped"):
        led = backtest(oracle_forecaster(data), data, data["S0"].dates[20])
    gone = str(data["S0"].dates[30])
    assert gone not in [r.date for r in led.rows]
    assert any(x["date"] == gone and x["symbol"] == "S1" for x in led.skipped)


def test_ledger_round_trip_recomputes_summary(tmp_path):
    data = market(3, 70)
    led = backtest(oracle_forecaster(data), data, data["S0"].dates[25], cost_bps=5)
    stored = write_ledger(led, tmp_path / "l.csv", tmp_path / "l.json")
    back = read_ledger(tmp_path / "l.csv", tmp_path / "l.json")
    assert back.summary() == stored
    assert np.array_equal(back.equity(), led.equity())
